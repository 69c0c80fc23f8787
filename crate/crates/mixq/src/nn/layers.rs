//! Parameter registry and the layer primitives used by the agent network:
//! plain linear, weight-standardized linear, and a GRU core.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mat::Mat;
use super::tape::{Tape, Var};

/// Index of a parameter tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named collection of parameter tensors. Online, target and eval sets of
/// one network share the same registry layout, so ids are interchangeable.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ParamSet {
    pub mats: Vec<Mat>,
    pub names: Vec<String>,
}

impl ParamSet {
    pub fn total_len(&self) -> usize {
        self.mats.iter().map(|m| m.data.len()).sum()
    }

    pub fn copy_from(&mut self, other: &ParamSet) {
        debug_assert_eq!(self.mats.len(), other.mats.len());
        for (a, b) in self.mats.iter_mut().zip(&other.mats) {
            a.data.copy_from_slice(&b.data);
        }
    }

    /// `self <- decay * self + (1 - decay) * other`, the EMA update used for
    /// evaluation parameters.
    pub fn ema_from(&mut self, other: &ParamSet, decay: f64) {
        debug_assert_eq!(self.mats.len(), other.mats.len());
        for (a, b) in self.mats.iter_mut().zip(&other.mats) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x = decay * *x + (1.0 - decay) * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mats.iter().all(|m| m.is_finite())
    }

    /// Flat views for gradient checks and tests.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for m in &self.mats {
            out.extend_from_slice(&m.data);
        }
        out
    }

    pub fn unflatten_into(&mut self, flat: &[f64]) {
        let mut at = 0;
        for m in self.mats.iter_mut() {
            let len = m.data.len();
            m.data.copy_from_slice(&flat[at..at + len]);
            at += len;
        }
        debug_assert_eq!(at, flat.len());
    }
}

/// Registers parameters during network construction.
pub struct ParamBuilder<'r, R: Rng> {
    pub set: ParamSet,
    pub rng: &'r mut R,
}

impl<'r, R: Rng> ParamBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        ParamBuilder {
            set: ParamSet::default(),
            rng,
        }
    }

    pub fn add(&mut self, name: &str, m: Mat) -> ParamId {
        self.set.mats.push(m);
        self.set.names.push(name.to_string());
        ParamId(self.set.mats.len() - 1)
    }

    fn glorot(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let m = Mat::uniform(rows, cols, limit, self.rng);
        self.add(name, m)
    }
}

/// Parameter values loaded onto a tape, aligned with the registry.
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    pub fn load(tape: &mut Tape, set: &ParamSet, trainable: bool) -> Self {
        let vars = set
            .mats
            .iter()
            .map(|m| {
                if trainable {
                    tape.param(m.clone())
                } else {
                    tape.constant(m.clone())
                }
            })
            .collect();
        ParamVars(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Collects gradients (post-`backward`) in registry order.
    pub fn grads(&self, tape: &Tape, grads: &[Mat], set: &ParamSet) -> Vec<Mat> {
        let _ = tape;
        self.0
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let g = &grads[v.0];
                if g.data.is_empty() {
                    Mat::zeros(set.mats[i].rows, set.mats[i].cols)
                } else {
                    g.clone()
                }
            })
            .collect()
    }
}

/// Plain affine layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: pb.glorot(&format!("{name}.w"), fan_in, fan_out),
            b: pb.add(&format!("{name}.b"), Mat::zeros(1, fan_out)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Var {
        let y = tape.matmul(x, pv.var(self.w));
        tape.add_row(y, pv.var(self.b))
    }
}

/// Weight-standardized affine layer.
///
/// The weight matrix is standardized per output unit (zero mean, unit
/// variance over the fan-in) and scaled by `1/sqrt(fan_in)` times a learnable
/// gain, which keeps activation variance controlled without normalization
/// layers. Standardization is part of the differentiable graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WsLinear {
    pub w: ParamId,
    pub gain: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
}

const WS_VAR_EPS: f64 = 1e-8;

impl WsLinear {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        // Raw scale is irrelevant after standardization; a unit normal is fine.
        let w = Mat::normal(fan_in, fan_out, 1.0, pb.rng);
        WsLinear {
            w: pb.add(&format!("{name}.w"), w),
            gain: pb.add(&format!("{name}.gain"), Mat::filled(1, fan_out, 1.0)),
            b: pb.add(&format!("{name}.b"), Mat::zeros(1, fan_out)),
            fan_in,
        }
    }

    fn standardized(&self, tape: &mut Tape, pv: &ParamVars) -> Var {
        let w = pv.var(self.w);
        let mu = tape.col_mean(w);
        let centered = tape.sub_row(w, mu);
        let sq = tape.mul(centered, centered);
        let var = tape.col_mean(sq);
        let var = tape.add_scalar(var, WS_VAR_EPS);
        let std = tape.sqrt(var);
        let unit = tape.div_row(centered, std);
        let scaled = tape.scale(unit, 1.0 / (self.fan_in as f64).sqrt());
        let gain = pv.var(self.gain);
        tape.mul_row(scaled, gain)
    }

    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Var {
        let w = self.standardized(tape, pv);
        let y = tape.matmul(x, w);
        tape.add_row(y, pv.var(self.b))
    }
}

/// Plain MLP with ReLU between layers and a linear output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpArch {
    pub layers: Vec<Linear>,
}

impl MlpArch {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<R>, name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::build(pb, &format!("{name}.l{i}"), w[0], w[1]))
            .collect();
        MlpArch { layers }
    }

    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, pv, h);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn forward_values(&self, params: &ParamSet, x: &Mat) -> Mat {
        let mut tape = Tape::new();
        let pv = ParamVars::load(&mut tape, params, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &pv, xv);
        tape.value(y).clone()
    }
}

/// Gated recurrent unit; gate layout `[z | r | n]` along the columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gru {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<R>, name: &str, input: usize, hidden: usize) -> Self {
        Gru {
            wx: pb.glorot(&format!("{name}.wx"), input, 3 * hidden),
            wh: pb.glorot(&format!("{name}.wh"), hidden, 3 * hidden),
            bx: pb.add(&format!("{name}.bx"), Mat::zeros(1, 3 * hidden)),
            bh: pb.add(&format!("{name}.bh"), Mat::zeros(1, 3 * hidden)),
            hidden,
        }
    }

    /// One step: `x [m, in]`, `h [m, H]` -> new `h [m, H]`.
    pub fn step(&self, tape: &mut Tape, pv: &ParamVars, x: Var, h: Var) -> Var {
        let hs = self.hidden;
        let gx = self.affine(tape, pv.var(self.wx), pv.var(self.bx), x);
        let gh = self.affine(tape, pv.var(self.wh), pv.var(self.bh), h);

        let zx = tape.slice_cols(gx, 0, hs);
        let zh = tape.slice_cols(gh, 0, hs);
        let z = tape.add(zx, zh);
        let z = tape.sigmoid(z);

        let rx = tape.slice_cols(gx, hs, 2 * hs);
        let rh = tape.slice_cols(gh, hs, 2 * hs);
        let r = tape.add(rx, rh);
        let r = tape.sigmoid(r);

        let nx = tape.slice_cols(gx, 2 * hs, 3 * hs);
        let nh = tape.slice_cols(gh, 2 * hs, 3 * hs);
        let rnh = tape.mul(r, nh);
        let n = tape.add(nx, rnh);
        let n = tape.tanh(n);

        // h' = (1-z) * n + z * h
        let zi = tape.one_minus(z);
        let a = tape.mul(zi, n);
        let b = tape.mul(z, h);
        tape.add(a, b)
    }

    fn affine(&self, tape: &mut Tape, w: Var, b: Var, x: Var) -> Var {
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ws_linear_output_is_scale_invariant_in_raw_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pb = ParamBuilder::new(&mut rng);
        let layer = WsLinear::build(&mut pb, "l", 5, 4);
        let mut set = pb.set;

        let x = Mat::uniform(3, 5, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let run = |set: &ParamSet| {
            let mut tape = Tape::new();
            let pv = ParamVars::load(&mut tape, set, false);
            let xv = tape.constant(x.clone());
            let y = layer.forward(&mut tape, &pv, xv);
            tape.value(y).clone()
        };
        let y1 = run(&set);
        // scaling raw weights leaves the standardized weights unchanged
        // (up to the variance epsilon)
        set.mats[layer.w.0].scale_assign(37.0);
        let y2 = run(&set);
        for (a, b) in y1.data.iter().zip(&y2.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gru_gradcheck_through_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pb = ParamBuilder::new(&mut rng);
        let gru = Gru::build(&mut pb, "g", 3, 4);
        let set = pb.set;
        let xs: Vec<Mat> = (0..3)
            .map(|i| Mat::uniform(2, 3, 0.8, &mut ChaCha8Rng::seed_from_u64(10 + i)))
            .collect();

        let loss_of = |set: &ParamSet| -> (f64, Vec<Mat>) {
            let mut tape = Tape::new();
            let pv = ParamVars::load(&mut tape, set, true);
            let mut h = tape.constant(Mat::zeros(2, 4));
            for x in &xs {
                let xv = tape.constant(x.clone());
                h = gru.step(&mut tape, &pv, xv, h);
            }
            let sq = tape.mul(h, h);
            let root = tape.sum_all(sq);
            let loss = tape.scalar(root);
            let grads = tape.backward(root);
            (loss, pv.grads(&tape, &grads, set))
        };

        let (_, analytic) = loss_of(&set);
        let h = 1e-6;
        for (mi, m) in set.mats.iter().enumerate() {
            for ei in 0..m.data.len() {
                let mut plus = set.clone();
                plus.mats[mi].data[ei] += h;
                let mut minus = set.clone();
                minus.mats[mi].data[ei] -= h;
                let fd = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
                let an = analytic[mi].data[ei];
                let denom = an.abs().max(fd.abs()).max(1.0);
                assert!(
                    (an - fd).abs() / denom < 1e-5,
                    "mat {mi} entry {ei}: {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn ema_and_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut pb = ParamBuilder::new(&mut rng);
        let _ = pb.add("a", Mat::filled(1, 2, 0.0));
        let mut eval = pb.set.clone();
        let mut online = pb.set.clone();
        online.mats[0] = Mat::filled(1, 2, 1.0);
        eval.ema_from(&online, 0.995);
        assert!((eval.mats[0].data[0] - 0.005).abs() < 1e-12);
        eval.copy_from(&online);
        assert_eq!(eval.mats[0].data, vec![1.0, 1.0]);
    }
}
