//! Feed-forward ReLU classifier.
//!
//! Layer `l` maps `R^{r_{l-1}}` to `R^{r_l}`: `z^1 = W^1 x + b^1` and
//! `z^l = W^l [z^{l-1}]^+ + b^l`. The logits are `z^L` and the predicted
//! class is their argmax.
//!
//! # Weight file
//!
//! Little-endian binary:
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 4                | magic `b"RBNW"`                           |
//! | 4 (`u32`)        | format version, currently 1               |
//! | 4 (`u32`)        | depth `L`                                 |
//! | 4 (`u32`) x L+1  | widths `r_0 .. r_L`                       |
//! | per layer        | `W^l` row-major (`r_l` rows of `r_{l-1}`), then `b^l`, all `f64` |

use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Real;
use crate::tape::{NodeId, Tape};
use crate::tensor::{argmax, Tensor};

const MAGIC: &[u8; 4] = b"RBNW";
const VERSION: u32 = 1;

/// A labelled input borrowed from a dataset.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a, T> {
    pub x: &'a [T],
    pub y: usize,
}

impl<'a, T> Example<'a, T> {
    pub fn new(x: &'a [T], y: usize) -> Self {
        Self { x, y }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    /// `r_out x r_in`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Layer<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || bias.len() != weight.rows() {
            return Err(Error::ShapeMismatch {
                op: "layer",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, h: &[T]) -> Vec<T> {
        let cols = self.inputs();
        (0..self.outputs())
            .map(|i| {
                let row = &self.weight.data()[i * cols..(i + 1) * cols];
                row.iter().zip(h).map(|(&w, &x)| w * x).sum::<T>() + self.bias.data()[i]
            })
            .collect()
    }
}

/// The parameters `theta = ((W^1, b^1), ..., (W^L, b^L))`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    layers: Vec<Layer<T>>,
}

/// All pre-activations of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    pub input: Vec<T>,
    /// `z^1 .. z^L`.
    pub preacts: Vec<Vec<T>>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn logits(&self) -> &[T] {
        self.preacts.last().expect("at least one layer")
    }

    pub fn activation_masks(&self) -> Vec<Vec<T>> {
        activation_masks(self)
    }
}

/// `[sign(z^l)]^+` for every hidden layer `l = 1 .. L-1`.
pub fn activation_masks<T: Real>(trace: &ForwardTrace<T>) -> Vec<Vec<T>> {
    let hidden = trace.preacts.len() - 1;
    trace.preacts[..hidden]
        .iter()
        .map(|z| z.iter().map(|v| v.step()).collect())
        .collect()
}

impl<T: Real> NetworkParams<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("no layers".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::InvalidNetwork(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    l + 1,
                    pair[0].outputs(),
                    l + 2,
                    pair[1].inputs()
                )));
            }
        }
        let k = layers.last().map_or(0, Layer::outputs);
        if k < 2 {
            return Err(Error::InvalidNetwork(format!("need at least 2 classes, got {k}")));
        }
        Ok(Self { layers })
    }

    /// Random network with widths `r_0 .. r_L`, each layer uniform on
    /// `(-a, a)` with `a = sqrt(6 / (r_in + r_out))` and zero biases.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidNetwork(format!("bad widths {widths:?}")));
        }
        let mut rng = SeededRng::new(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new(-a, a);
                let data = (0..fan_in * fan_out).map(|_| T::lit(dist.sample(&mut rng))).collect();
                Layer::new(
                    Tensor::matrix(fan_out, fan_in, data)?,
                    Tensor::zeros(&[fan_out]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// `L`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `M = r_0`.
    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    /// `K = r_L`.
    pub fn class_count(&self) -> usize {
        self.layers.last().expect("nonempty").outputs()
    }

    /// `r_0 .. r_L`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::outputs))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.class_count() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: self.class_count(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[T]) -> Result<ForwardTrace<T>> {
        self.check_input(x)?;
        let mut preacts: Vec<Vec<T>> = Vec::with_capacity(self.depth());
        for (l, layer) in self.layers.iter().enumerate() {
            let z = if l == 0 {
                layer.apply(x)
            } else {
                let h: Vec<T> = preacts[l - 1].iter().map(|v| v.pos()).collect();
                layer.apply(&h)
            };
            preacts.push(z);
        }
        Ok(ForwardTrace {
            input: x.to_vec(),
            preacts,
        })
    }

    pub fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.forward(x)?.preacts.pop().expect("nonempty"))
    }

    /// `argmax_k z^L_k`, lowest index on ties.
    pub fn predict(&self, x: &[T]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// `J = W^L D_{L-1} W^{L-1} ... D_1 W^1` (K x M), with `D_l` the
    /// activation mask of layer `l` at `x`.
    pub fn input_jacobian(&self, x: &[T]) -> Result<Tensor<T>> {
        let masks = self.forward(x)?.activation_masks();
        let mut j = self.layers[0].weight.clone();
        for (layer, mask) in self.layers[1..].iter().zip(&masks) {
            let cols = j.cols();
            for (r, &m) in mask.iter().enumerate() {
                for v in &mut j.data_mut()[r * cols..(r + 1) * cols] {
                    *v = *v * m;
                }
            }
            j = layer.weight.matmul(&j)?;
        }
        Ok(j)
    }

    /// `J^T v` by a reverse pass through the masked layers.
    pub fn input_vjp(&self, x: &[T], v: &[T]) -> Result<Vec<T>> {
        let masks = self.forward(x)?.activation_masks();
        if v.len() != self.class_count() {
            return Err(Error::DimensionMismatch {
                expected: self.class_count(),
                got: v.len(),
            });
        }
        let mut g = v.to_vec();
        for l in (0..self.depth()).rev() {
            let w = &self.layers[l].weight;
            let (rows, cols) = (w.rows(), w.cols());
            let mut back = vec![T::zero(); cols];
            for i in 0..rows {
                let gi = g[i];
                if gi == T::zero() {
                    continue;
                }
                for (b, &wij) in back.iter_mut().zip(&w.data()[i * cols..(i + 1) * cols]) {
                    *b = *b + wij * gi;
                }
            }
            if l > 0 {
                for (b, &m) in back.iter_mut().zip(&masks[l - 1]) {
                    *b = *b * m;
                }
            }
            g = back;
        }
        Ok(g)
    }

    /// Parameters-shaped zeros, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
        }
    }

    /// `self += c * other` over every parameter.
    pub fn axpy(&mut self, c: T, other: &Self) -> Result<()> {
        if self.widths() != other.widths() {
            return Err(Error::InvalidNetwork("architecture mismatch".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.axpy(c, &b.weight)?;
            a.bias.axpy(c, &b.bias)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: T) {
        for l in &mut self.layers {
            l.weight = l.weight.scale(c);
            l.bias = l.bias.scale(c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    /// Flattened parameters, layer by layer (`W^l` then `b^l`).
    pub fn flat(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
            .collect()
    }

    /// Inverse of [`NetworkParams::flat`] for the same architecture.
    pub fn with_flat(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.parameter_count() {
            return Err(Error::DimensionMismatch {
                expected: self.parameter_count(),
                got: flat.len(),
            });
        }
        let mut out = self.clone();
        let mut off = 0;
        for l in &mut out.layers {
            let n = l.weight.len();
            l.weight.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            let n = l.bias.len();
            l.bias.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }

    /// Registers every parameter as a tape leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> ParamNodes {
        ParamNodes {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.depth() as u32).to_le_bytes())?;
        for r in self.widths() {
            w.write_all(&(r as u32).to_le_bytes())?;
        }
        for l in &self.layers {
            for v in l.weight.data().iter().chain(l.bias.data()) {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a weight file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported weight file version {version}")));
        }
        let depth = read_u32(&mut r)? as usize;
        if depth == 0 {
            return Err(Error::Format("zero depth".into()));
        }
        let widths = (0..=depth)
            .map(|_| read_u32(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::with_capacity(depth);
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weight = read_f64s(&mut r, fan_in * fan_out)?;
            let bias = read_f64s(&mut r, fan_out)?;
            layers.push(Layer::new(
                Tensor::matrix(fan_out, fan_in, weight)?,
                Tensor::new(vec![fan_out], bias)?,
            )?);
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes after weights".into()));
        }
        Self::new(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated("weight file".into()),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<T: Real>(r: &mut impl Read, n: usize) -> Result<Vec<T>> {
    let mut b = [0u8; 8];
    (0..n)
        .map(|_| {
            read_exact(r, &mut b)?;
            Ok(T::lit(f64::from_le_bytes(b)))
        })
        .collect()
}

/// Tape leaves holding `(W^l, b^l)` for every layer.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl ParamNodes {
    /// Reads the parameter gradients after [`Tape::backward`].
    pub fn gradients<T: Real>(&self, tape: &Tape<T>, like: &NetworkParams<T>) -> NetworkParams<T> {
        let mut out = like.zeros_like();
        for (layer, &(w, b)) in out.layers.iter_mut().zip(&self.layers) {
            if let Some(g) = tape.grad(w) {
                layer.weight = g.clone();
            }
            if let Some(g) = tape.grad(b) {
                layer.bias = g.clone();
            }
        }
        out
    }

    /// Records the forward pass for one input; returns the nodes `z^1 .. z^L`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: &[T]) -> Result<Vec<NodeId>> {
        let input = tape.constant(Tensor::vector(x.to_vec()));
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut h = input;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            if l > 0 {
                h = tape.relu(h);
            }
            let wx = tape.matmul(w, h)?;
            let z = tape.add(wx, b)?;
            preacts.push(z);
            h = z;
        }
        Ok(preacts)
    }

    /// Records `J = W^L D_{L-1} ... D_1 W^1` with the masks held constant.
    pub fn input_jacobian<T: Real>(&self, tape: &mut Tape<T>, masks: &[Vec<T>]) -> Result<NodeId> {
        let mut j = self.layers[0].0;
        for (&(w, _), mask) in self.layers[1..].iter().zip(masks) {
            let masked = tape.scale_rows(j, mask.clone())?;
            j = tape.matmul(w, masked)?;
        }
        Ok(j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::{random_net, random_x};

    #[test]
    fn single_layer_identity() {
        let net = NetworkParams::new(vec![Layer::new(Tensor::identity(3), Tensor::zeros(&[3])).unwrap()])
            .unwrap();
        let x = [0.5, -1.0, 2.0];
        assert_eq!(net.forward(&x).unwrap().preacts, vec![x.to_vec()]);
        assert_eq!(net.input_jacobian(&x).unwrap(), Tensor::identity(3));
    }

    #[test]
    fn one_output_layer_rejected_as_classifier() {
        let w = Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap();
        let layer = Layer::new(w, Tensor::zeros(&[1])).unwrap();
        assert_eq!(layer.apply(&[2.0, 3.0]), vec![-1.0]);
        assert!(NetworkParams::new(vec![layer]).is_err());
    }

    #[test]
    fn two_layer_hand_computed() {
        let l1 = Layer::new(
            Tensor::matrix(2, 2, vec![1.0, -1.0, 2.0, 0.5]).unwrap(),
            Tensor::vector(vec![0.0, -1.0]),
        )
        .unwrap();
        let l2 = Layer::new(
            Tensor::matrix(2, 2, vec![1.0, 1.0, -1.0, 3.0]).unwrap(),
            Tensor::vector(vec![0.5, 0.0]),
        )
        .unwrap();
        let net = NetworkParams::new(vec![l1, l2]).unwrap();
        // z1 = (1*1 - 1*2, 2*1 + 0.5*2 - 1) = (-1, 2); h = (0, 2)
        // z2 = (0 + 2 + 0.5, 0 + 6) = (2.5, 6)
        let t = net.forward(&[1.0, 2.0]).unwrap();
        assert_eq!(t.preacts, vec![vec![-1.0, 2.0], vec![2.5, 6.0]]);
        assert_eq!(t.activation_masks(), vec![vec![0.0, 1.0]]);
        assert_eq!(net.predict(&[1.0, 2.0]).unwrap(), 1);
    }

    #[test]
    fn dimension_mismatch() {
        let net = random_net(&[3, 4, 2], 1);
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
        assert!(NetworkParams::<f64>::new(vec![
            Layer::new(Tensor::zeros(&[4, 3]), Tensor::zeros(&[4])).unwrap(),
            Layer::new(Tensor::zeros(&[2, 5]), Tensor::zeros(&[2])).unwrap(),
        ])
        .is_err());
    }

    #[test]
    fn predict_tie_and_shift() {
        let w = Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap();
        let net = NetworkParams::new(vec![Layer::new(w, Tensor::vector(vec![0.5, 0.5])).unwrap()]).unwrap();
        assert_eq!(net.predict(&[1.0]).unwrap(), 0);
        let w = Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap();
        let net = NetworkParams::new(vec![Layer::new(w, Tensor::vector(vec![0.1, 0.9])).unwrap()]).unwrap();
        assert_eq!(net.predict(&[1.0]).unwrap(), 1);

        let mut net = random_net(&[4, 6, 3], 9);
        let x = random_x(4, 2);
        let before = net.predict(&x).unwrap();
        let last = net.layers_mut().last_mut().unwrap();
        last.bias = last.bias.map(|b| b + 17.0);
        assert_eq!(net.predict(&x).unwrap(), before);
    }

    #[test]
    fn zero_preactivation_masks_to_zero() {
        let trace = ForwardTrace {
            input: vec![0.0],
            preacts: vec![vec![0.0, 0.0], vec![1.0, 2.0]],
        };
        assert_eq!(activation_masks(&trace), vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn inactive_hidden_layer_zero_jacobian() {
        let mut net = random_net(&[3, 5, 2], 4);
        net.layers_mut()[0].bias = Tensor::full(&[5], -100.0);
        let j = net.input_jacobian(&[0.1, 0.2, 0.3]).unwrap();
        assert!(j.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_linearisation_reproduces_logits() {
        for seed in 0..20 {
            let net = random_net(&[5, 7, 6, 3], seed);
            let x = random_x(5, seed + 100);
            let trace = net.forward(&x).unwrap();
            let masks = trace.activation_masks();
            let mut h = x.clone();
            for (l, layer) in net.layers().iter().enumerate() {
                let mut z = layer.apply(&h);
                if l + 1 < net.depth() {
                    for (v, m) in z.iter_mut().zip(&masks[l]) {
                        *v *= m;
                    }
                }
                h = z;
            }
            assert_eq!(h, trace.logits());
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let h = 1e-5;
        for seed in 0..10 {
            let net = random_net(&[4, 8, 8, 3], seed);
            let x = random_x(4, seed + 50);
            let j = net.input_jacobian(&x).unwrap();
            for m in 0..4 {
                let mut xp = x.clone();
                xp[m] += h;
                let mut xm = x.clone();
                xm[m] -= h;
                let (zp, zm) = (net.logits(&xp).unwrap(), net.logits(&xm).unwrap());
                for k in 0..3 {
                    let fd = (zp[k] - zm[k]) / (2.0 * h);
                    assert!((j.at(k, m) - fd).abs() / (1.0 + fd.abs()) < 1e-4);
                }
            }
            let v = [0.3, -1.0, 2.0];
            let vjp = net.input_vjp(&x, &v).unwrap();
            let jt = j.transpose().matmul(&Tensor::vector(v.to_vec())).unwrap();
            for (a, b) in vjp.iter().zip(jt.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_within_activation_region() {
        for seed in 0..20 {
            let net = random_net(&[3, 6, 4], seed);
            let x = random_x(3, seed + 7);
            let trace = net.forward(&x).unwrap();
            let j = net.input_jacobian(&x).unwrap();
            let min_abs = trace.preacts[0].iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            let delta: Vec<f64> = vec![min_abs * 1e-3, -min_abs * 1e-3, min_abs * 5e-4];
            let xd: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
            assert_eq!(net.forward(&xd).unwrap().activation_masks(), trace.activation_masks());
            let jd = j.matmul(&Tensor::vector(delta)).unwrap();
            for ((a, b), c) in net.logits(&xd).unwrap().iter().zip(trace.logits()).zip(jd.data()) {
                assert!((a - (b + c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn init_is_reproducible() {
        let a = NetworkParams::<f64>::init(&[10, 20, 3], 5).unwrap();
        let b = NetworkParams::<f64>::init(&[10, 20, 3], 5).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(a.layers()[0].weight.data().iter().all(|w| w.abs() < bound));
        assert_ne!(a, NetworkParams::<f64>::init(&[10, 20, 3], 6).unwrap());
    }

    #[test]
    fn weight_file_round_trip() {
        let net = random_net(&[3, 5, 4, 2], 3);
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"RBNW");
        assert_eq!(buf.len(), 4 + 4 + 4 + 4 * 4 + 8 * net.parameter_count());
        let back = NetworkParams::<f64>::read_from(&buf[..]).unwrap();
        assert_eq!(back, net);
        assert!(matches!(
            NetworkParams::<f64>::read_from(&buf[..buf.len() - 3]),
            Err(Error::Truncated(_))
        ));
        buf.push(0);
        assert!(matches!(NetworkParams::<f64>::read_from(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let net = random_net(&[4, 6, 5, 3], 12);
        let x = random_x(4, 3);
        let mut tape = Tape::new();
        let nodes = net.register(&mut tape);
        let z = nodes.forward(&mut tape, &x).unwrap();
        let trace = net.forward(&x).unwrap();
        for (id, pre) in z.iter().zip(&trace.preacts) {
            assert_eq!(tape.value(*id).data(), pre.as_slice());
        }
        let j = nodes.input_jacobian(&mut tape, &trace.activation_masks()).unwrap();
        assert_eq!(tape.value(j), &net.input_jacobian(&x).unwrap());
    }

    #[test]
    fn single_precision_forward() {
        let net64 = random_net(&[3, 4, 2], 8);
        let net32: NetworkParams<f32> = net64.cast();
        let x = [0.25f32, -0.5, 0.75];
        let z32 = net32.logits(&x).unwrap();
        let z64 = net64.logits(&[0.25, -0.5, 0.75]).unwrap();
        for (a, b) in z32.iter().zip(&z64) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }
}
