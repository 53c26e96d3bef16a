//! LSTM cells, sequence LSTMs, bidirectional encoders and MLPs.
//!
//! Parameter structs own [`Tensor`]s. To run them on a tape, `bind` creates
//! one leaf per tensor and returns a `Bound*` view holding the [`Var`]s;
//! after `Tape::backward`, `absorb` adds the leaf gradients back into the
//! owning tensors.
//!
//! LSTM gate rows are packed in the order input, forget, cell, output.

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named traversal over every trainable tensor, in a fixed order.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

/// All tensors of `p` with their archive keys.
pub fn named_tensors<'a, P: Parameters + ?Sized>(p: &'a P, prefix: &str) -> Vec<(String, &'a Tensor)> {
    let mut out = Vec::new();
    p.visit(prefix, &mut |name, t| out.push((name, t)));
    out
}

pub fn parameter_count<P: Parameters + ?Sized>(p: &P) -> usize {
    named_tensors(p, "").iter().map(|(_, t)| t.len()).sum()
}

pub fn zero_grads<P: Parameters + ?Sized>(p: &mut P) {
    p.visit_mut("", &mut |_, t| t.zero_grad());
}

/// FNV-1a over the bit patterns of every value, in visit order.
pub fn checksum<P: Parameters + ?Sized>(p: &P) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, t) in named_tensors(p, "") {
        for b in name.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
        for v in t.data() {
            for b in v.to_bits().to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

fn uniform(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data)
        .expect("finite init")
        .with_grad()
}

/// Affine map `W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl Linear {
    /// Uniform init in `[-1/sqrt(in), 1/sqrt(in)]`.
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Linear {
            weight: uniform(vec![output, input], bound, rng),
            bias: uniform(vec![output], bound, rng),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(vec![output, input]).with_grad(),
            bias: Tensor::zeros(vec![output]).with_grad(),
        }
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::Shape {
                op: "linear",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Linear {
            weight: weight.with_grad(),
            bias: bias.with_grad(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundLinear<'t> {
        BoundLinear {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
        }
    }

    pub fn absorb(&mut self, bound: &BoundLinear<'_>, grads: &Gradients) -> Result<()> {
        grads.accumulate_into(bound.weight, &mut self.weight)?;
        grads.accumulate_into(bound.bias, &mut self.bias)
    }
}

impl<'t> BoundLinear<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.weight.matmul(x)?.add(self.bias)
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Single-layer LSTM parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `[4H, D]`
    pub input_weights: Tensor,
    /// `[4H, H]`
    pub recurrent_weights: Tensor,
    /// `[4H]`
    pub biases: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLstm<'t> {
    pub input_weights: Var<'t>,
    pub recurrent_weights: Var<'t>,
    pub biases: Var<'t>,
    hidden: usize,
}

/// Output of [`lstm_forward`].
#[derive(Debug, Clone)]
pub struct LstmOutput<'t> {
    /// Hidden state after every step.
    pub hidden: Vec<Var<'t>>,
    pub h: Var<'t>,
    pub c: Var<'t>,
}

impl LstmParams {
    /// Uniform init in `[-1/sqrt(H), 1/sqrt(H)]`, then the forget-gate bias set to 1.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let input_weights = uniform(vec![4 * hidden, input], bound, rng);
        let recurrent_weights = uniform(vec![4 * hidden, hidden], bound, rng);
        let mut biases = uniform(vec![4 * hidden], bound, rng);
        biases.data_mut()[hidden..2 * hidden].fill(1.0);
        LstmParams {
            input_weights,
            recurrent_weights,
            biases,
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            input_weights: Tensor::zeros(vec![4 * hidden, input]).with_grad(),
            recurrent_weights: Tensor::zeros(vec![4 * hidden, hidden]).with_grad(),
            biases: Tensor::zeros(vec![4 * hidden]).with_grad(),
        }
    }

    pub fn from_tensors(input_weights: Tensor, recurrent_weights: Tensor, biases: Tensor) -> Result<Self> {
        let (wi, wh, b) = (input_weights.shape(), recurrent_weights.shape(), biases.shape());
        let ok = wi.len() == 2
            && wh.len() == 2
            && b.len() == 1
            && wi[0] % 4 == 0
            && wh[0] == wi[0]
            && b[0] == wi[0]
            && wh[1] * 4 == wh[0];
        if !ok {
            return Err(Error::Shape {
                op: "lstm params",
                lhs: wi.to_vec(),
                rhs: wh.to_vec(),
            });
        }
        Ok(LstmParams {
            input_weights: input_weights.with_grad(),
            recurrent_weights: recurrent_weights.with_grad(),
            biases: biases.with_grad(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_weights.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.recurrent_weights.shape()[1]
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundLstm<'t> {
        BoundLstm {
            input_weights: tape.leaf(&self.input_weights),
            recurrent_weights: tape.leaf(&self.recurrent_weights),
            biases: tape.leaf(&self.biases),
            hidden: self.hidden_dim(),
        }
    }

    pub fn absorb(&mut self, bound: &BoundLstm<'_>, grads: &Gradients) -> Result<()> {
        grads.accumulate_into(bound.input_weights, &mut self.input_weights)?;
        grads.accumulate_into(bound.recurrent_weights, &mut self.recurrent_weights)?;
        grads.accumulate_into(bound.biases, &mut self.biases)
    }
}

impl Parameters for LstmParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "w_ih"), &self.input_weights);
        f(join(prefix, "w_hh"), &self.recurrent_weights);
        f(join(prefix, "bias"), &self.biases);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "w_ih"), &mut self.input_weights);
        f(join(prefix, "w_hh"), &mut self.recurrent_weights);
        f(join(prefix, "bias"), &mut self.biases);
    }
}

impl<'t> BoundLstm<'t> {
    /// Wraps tape variables shaped `[4H, D]`, `[4H, H]` and `[4H]`.
    pub fn from_vars(input_weights: Var<'t>, recurrent_weights: Var<'t>, biases: Var<'t>) -> Result<Self> {
        let four_h = biases.numel();
        let hidden = four_h / 4;
        let ok = biases.shape() == [four_h]
            && four_h % 4 == 0
            && hidden > 0
            && input_weights.shape().first() == Some(&four_h)
            && input_weights.shape().len() == 2
            && recurrent_weights.shape() == [four_h, hidden];
        if !ok {
            return Err(Error::Shape {
                op: "BoundLstm::from_vars",
                lhs: input_weights.shape(),
                rhs: recurrent_weights.shape(),
            });
        }
        Ok(BoundLstm {
            input_weights,
            recurrent_weights,
            biases,
            hidden,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    /// Zero initial `(h, c)` on the same tape.
    pub fn zero_state(&self) -> (Var<'t>, Var<'t>) {
        let tape = self.biases.tape();
        let h = tape.vector(vec![0.0; self.hidden]).expect("zeros are finite");
        let c = tape.vector(vec![0.0; self.hidden]).expect("zeros are finite");
        (h, c)
    }
}

/// One LSTM step: `c' = f*c + i*g`, `h' = o*tanh(c')`.
pub fn lstm_cell_step<'t>(p: &BoundLstm<'t>, x: Var<'t>, h: Var<'t>, c: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let hd = p.hidden;
    if h.shape() != [hd] || c.shape() != [hd] {
        return Err(Error::Shape {
            op: "lstm_cell_step state",
            lhs: vec![hd],
            rhs: if h.shape() != [hd] { h.shape() } else { c.shape() },
        });
    }
    let gates = p
        .input_weights
        .matmul(x)?
        .add(p.recurrent_weights.matmul(h)?)?
        .add(p.biases)?;
    let i = gates.slice(0, hd)?.sigmoid();
    let f = gates.slice(hd, hd)?.sigmoid();
    let g = gates.slice(2 * hd, hd)?.tanh();
    let o = gates.slice(3 * hd, hd)?.sigmoid();
    let c_next = f.mul(c)?.add(i.mul(g)?)?;
    let h_next = o.mul(c_next.tanh())?;
    Ok((h_next, c_next))
}

/// Left fold of [`lstm_cell_step`] over `xs`.
pub fn lstm_forward<'t>(p: &BoundLstm<'t>, xs: &[Var<'t>], h0: Var<'t>, c0: Var<'t>) -> Result<LstmOutput<'t>> {
    if xs.is_empty() {
        return Err(Error::Empty("lstm_forward sequence"));
    }
    let (mut h, mut c) = (h0, c0);
    let mut hidden = Vec::with_capacity(xs.len());
    for &x in xs {
        (h, c) = lstm_cell_step(p, x, h, c)?;
        hidden.push(h);
    }
    Ok(LstmOutput { hidden, h, c })
}

/// Final forward-direction hidden state concatenated with the final hidden
/// state of a second LSTM run over the reversed sequence. Output width `2H`.
pub fn bilstm_encode<'t>(fwd: &BoundLstm<'t>, bwd: &BoundLstm<'t>, xs: &[Var<'t>]) -> Result<Var<'t>> {
    if xs.is_empty() {
        return Err(Error::Empty("bilstm_encode sequence"));
    }
    let (h0, c0) = fwd.zero_state();
    let forward = lstm_forward(fwd, xs, h0, c0)?;
    let reversed: Vec<Var<'t>> = xs.iter().rev().copied().collect();
    let (h0, c0) = bwd.zero_state();
    let backward = lstm_forward(bwd, &reversed, h0, c0)?;
    forward.h.concat(backward.h, 0)
}

/// Multi-layer perceptron: tanh between layers, identity on the last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct BoundMlp<'t> {
    pub layers: Vec<BoundLinear<'t>>,
}

impl MlpParams {
    /// `widths` lists every layer width including input and output.
    pub fn init(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output widths".into()));
        }
        Ok(MlpParams {
            layers: widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect(),
        })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("MLP layers"));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape {
                    op: "mlp layer chain",
                    lhs: pair[0].weight.shape().to_vec(),
                    rhs: pair[1].weight.shape().to_vec(),
                });
            }
        }
        Ok(MlpParams { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        BoundMlp {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
        }
    }

    pub fn absorb(&mut self, bound: &BoundMlp<'_>, grads: &Gradients) -> Result<()> {
        for (layer, b) in self.layers.iter_mut().zip(&bound.layers) {
            layer.absorb(b, grads)?;
        }
        Ok(())
    }
}

impl Parameters for MlpParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

pub fn mlp_forward<'t>(p: &BoundMlp<'t>, z: Var<'t>) -> Result<Var<'t>> {
    let last = p.layers.len() - 1;
    let mut x = z;
    for (i, layer) in p.layers.iter().enumerate() {
        x = layer.forward(x)?;
        if i < last {
            x = x.tanh();
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn random_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_params_with_zero_cell_give_zero_state() {
        let p = LstmParams::zeros(3, 2);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let x = tape.vector(vec![5.0, -1.0, 2.0]).unwrap();
        let (h, c) = b.zero_state();
        let (h, c) = lstm_cell_step(&b, x, h, c).unwrap();
        assert_eq!(h.value(), vec![0.0, 0.0]);
        assert_eq!(c.value(), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_params_closed_form_gates() {
        let p = LstmParams::zeros(2, 1);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let x = tape.vector(vec![0.7, -0.2]).unwrap();
        let h = tape.vector(vec![0.0]).unwrap();
        let c = tape.vector(vec![2.0]).unwrap();
        let (h, c) = lstm_cell_step(&b, x, h, c).unwrap();
        assert_eq!(c.value(), vec![1.0]);
        assert!((h.item() - 0.5 * 1f64.tanh()).abs() < 1e-15);
        assert!((h.item() - 0.380797).abs() < 1e-6);
    }

    #[test]
    fn init_sets_forget_bias_and_bounds() {
        let p = LstmParams::init(4, 8, &mut rng());
        let b = p.biases.data();
        assert!(b[8..16].iter().all(|&v| v == 1.0));
        let bound = 1.0 / 8f64.sqrt();
        assert!(p.input_weights.data().iter().all(|v| v.abs() <= bound));
        assert!(p.recurrent_weights.data().iter().all(|v| v.abs() <= bound));
        assert_eq!(p.input_dim(), 4);
        assert_eq!(p.hidden_dim(), 8);
    }

    #[test]
    fn cell_step_rejects_bad_state() {
        let p = LstmParams::zeros(2, 3);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let x = tape.vector(vec![0.0, 0.0]).unwrap();
        let h = tape.vector(vec![0.0; 2]).unwrap();
        let c = tape.vector(vec![0.0; 3]).unwrap();
        assert!(lstm_cell_step(&b, x, h, c).is_err());
        let x_bad = tape.vector(vec![0.0; 5]).unwrap();
        let (h, c) = b.zero_state();
        assert!(lstm_cell_step(&b, x_bad, h, c).is_err());
    }

    #[test]
    fn cell_step_grad_check() {
        let mut r = rng();
        let p = LstmParams::init(3, 4, &mut r);
        let inputs = vec![
            p.input_weights.clone(),
            p.recurrent_weights.clone(),
            p.biases.clone(),
            Tensor::vector(random_vec(3, &mut r)).unwrap(),
            Tensor::vector(random_vec(4, &mut r)).unwrap(),
            Tensor::vector(random_vec(4, &mut r)).unwrap(),
        ];
        let err = grad_check_many(
            |_, v| {
                let b = BoundLstm {
                    input_weights: v[0],
                    recurrent_weights: v[1],
                    biases: v[2],
                    hidden: 4,
                };
                let (h, c) = lstm_cell_step(&b, v[3], v[4], v[5])?;
                Ok(h.mul(h)?.sum().add(c.sum())?)
            },
            &inputs,
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn forward_is_left_fold_of_cell_steps() {
        let mut r = rng();
        let p = LstmParams::init(3, 5, &mut r);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let xs: Vec<_> = (0..45)
            .map(|_| tape.vector(random_vec(3, &mut r)).unwrap())
            .collect();
        let (h0, c0) = b.zero_state();
        let out = lstm_forward(&b, &xs, h0, c0).unwrap();

        let (mut h, mut c) = b.zero_state();
        for &x in &xs {
            (h, c) = lstm_cell_step(&b, x, h, c).unwrap();
        }
        assert_eq!(out.h.value(), h.value());
        assert_eq!(out.c.value(), c.value());
        assert_eq!(out.hidden.len(), 45);

        let (h0, c0) = b.zero_state();
        let single = lstm_forward(&b, &xs[..1], h0, c0).unwrap();
        let (h0, c0) = b.zero_state();
        let (h1, _) = lstm_cell_step(&b, xs[0], h0, c0).unwrap();
        assert_eq!(single.h.value(), h1.value());
    }

    #[test]
    fn forward_with_zero_params_stays_zero_and_rejects_empty() {
        let p = LstmParams::zeros(2, 3);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let xs: Vec<_> = (0..6)
            .map(|i| tape.vector(vec![i as f64, -(i as f64)]).unwrap())
            .collect();
        let (h0, c0) = b.zero_state();
        let out = lstm_forward(&b, &xs, h0, c0).unwrap();
        assert!(out.hidden.iter().all(|h| h.value() == vec![0.0; 3]));
        let (h0, c0) = b.zero_state();
        assert!(matches!(lstm_forward(&b, &[], h0, c0), Err(Error::Empty(_))));
    }

    #[test]
    fn bilstm_composition_and_symmetry() {
        let mut r = rng();
        let pf = LstmParams::init(2, 3, &mut r);
        let pb = LstmParams::init(2, 3, &mut r);
        let tape = Tape::new();
        let (bf, bb) = (pf.bind(&tape), pb.bind(&tape));
        let xs: Vec<_> = (0..7)
            .map(|_| tape.vector(random_vec(2, &mut r)).unwrap())
            .collect();
        let enc = bilstm_encode(&bf, &bb, &xs).unwrap();
        assert_eq!(enc.shape(), vec![6]);

        let (h0, c0) = bf.zero_state();
        let f = lstm_forward(&bf, &xs, h0, c0).unwrap().h.value();
        let rev: Vec<_> = xs.iter().rev().copied().collect();
        let (h0, c0) = bb.zero_state();
        let g = lstm_forward(&bb, &rev, h0, c0).unwrap().h.value();
        assert_eq!(enc.value(), [f, g].concat());

        // reversed input with swapped directions swaps the halves
        let swapped = bilstm_encode(&bb, &bf, &rev).unwrap().value();
        let v = enc.value();
        assert_eq!(swapped, [&v[3..], &v[..3]].concat());

        // palindrome with shared params: identical halves
        let pal: Vec<_> = xs[..3]
            .iter()
            .chain(xs[..3].iter().rev())
            .copied()
            .collect();
        let out = bilstm_encode(&bf, &bf, &pal).unwrap().value();
        assert_eq!(out[..3], out[3..]);

        let zf = LstmParams::zeros(2, 3);
        let zb = zf.bind(&tape);
        assert_eq!(bilstm_encode(&zb, &zb, &xs).unwrap().value(), vec![0.0; 6]);
        assert!(bilstm_encode(&zb, &zb, &[]).is_err());
    }

    #[test]
    fn cell_state_stays_bounded() {
        let mut r = rng();
        let p = LstmParams::init(2, 4, &mut r);
        let tape = Tape::inference();
        let b = p.bind(&tape);
        let (mut h, mut c) = b.zero_state();
        let mut prev_max = 0.0_f64;
        for _ in 0..200 {
            let x = tape
                .vector(vec![r.gen_range(-50.0..50.0), r.gen_range(-50.0..50.0)])
                .unwrap();
            (h, c) = lstm_cell_step(&b, x, h, c).unwrap();
            let m = c.value().iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            assert!(m <= prev_max + 1.0 + 1e-12);
            prev_max = m;
        }
        assert!(h.value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mlp_identity_constant_and_grad_check() {
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mlp = MlpParams::from_layers(vec![Linear::from_tensors(w, Tensor::zeros(vec![2])).unwrap()]).unwrap();
        let tape = Tape::new();
        let z = tape.vector(vec![0.3, -4.0]).unwrap();
        assert_eq!(mlp_forward(&mlp.bind(&tape), z).unwrap().value(), vec![0.3, -4.0]);

        let mut constant = MlpParams::from_layers(vec![Linear::zeros(2, 3)]).unwrap();
        constant.layers[0].bias.set_data(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(
            mlp_forward(&constant.bind(&tape), z).unwrap().value(),
            vec![1.0, 2.0, 3.0]
        );
        let wrong = tape.vector(vec![1.0; 3]).unwrap();
        assert!(mlp_forward(&mlp.bind(&tape), wrong).is_err());

        let mut r = rng();
        let mlp = MlpParams::init(&[3, 5, 4], &mut r).unwrap();
        let mut inputs: Vec<Tensor> = named_tensors(&mlp, "").into_iter().map(|(_, t)| t.clone()).collect();
        inputs.push(Tensor::vector(random_vec(3, &mut r)).unwrap());
        let err = grad_check_many(
            |_, v| {
                let b = BoundMlp {
                    layers: vec![
                        BoundLinear { weight: v[0], bias: v[1] },
                        BoundLinear { weight: v[2], bias: v[3] },
                    ],
                };
                let y = mlp_forward(&b, v[4])?;
                Ok(y.mul(y)?.sum())
            },
            &inputs,
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn mlp_layers_must_chain() {
        let mut r = rng();
        let a = Linear::init(3, 4, &mut r);
        let b = Linear::init(5, 2, &mut r);
        assert!(MlpParams::from_layers(vec![a, b]).is_err());
        assert!(MlpParams::init(&[3], &mut r).is_err());
    }

    #[test]
    fn absorb_routes_gradients_to_owning_tensors() {
        let mut r = rng();
        let mut p = LstmParams::init(2, 2, &mut r);
        let tape = Tape::new();
        let b = p.bind(&tape);
        let x = tape.vector(vec![1.0, -1.0]).unwrap();
        let (h, c) = b.zero_state();
        let (h, _) = lstm_cell_step(&b, x, h, c).unwrap();
        let grads = tape.backward(h.sum()).unwrap();
        p.absorb(&b, &grads).unwrap();
        assert_eq!(p.input_weights.grad().unwrap(), grads.wrt(b.input_weights).unwrap());
        assert!(p.recurrent_weights.grad().is_some());
        zero_grads(&mut p);
        assert!(p.biases.grad().is_none());
    }

    #[test]
    fn checksum_and_names() {
        let mut r = rng();
        let mlp = MlpParams::init(&[2, 3, 1], &mut r).unwrap();
        let names: Vec<String> = named_tensors(&mlp, "generator").into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            ["generator/layer0/weight", "generator/layer0/bias", "generator/layer1/weight", "generator/layer1/bias"]
        );
        let mut other = mlp.clone();
        assert_eq!(checksum(&mlp), checksum(&other));
        other.layers[1].bias.set_data(vec![0.123]).unwrap();
        assert_ne!(checksum(&mlp), checksum(&other));
        assert_eq!(parameter_count(&mlp), 6 + 3 + 3 + 1);
    }
}
