//! Building blocks shared by the network stages.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::ParamStore;
use crate::autograd::{Tape, Taps, Var};
use crate::tensor::Tensor;

/// Parameter lookup during one forward pass.
#[derive(Clone, Copy)]
pub(crate) struct Ctx<'t, 's> {
    pub tape: &'t Tape,
    pub store: &'s ParamStore,
    pub trainable: bool,
}

impl<'t> Ctx<'t, '_> {
    pub fn p(&self, name: &str) -> Var<'t> {
        let value = self.store.get(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        if self.trainable {
            self.tape.named_leaf(name, value)
        } else {
            self.tape.named_constant(name, value)
        }
    }

    /// `x [n, in] · W [in, out] + b`.
    pub fn linear(&self, name: &str, x: Var<'t>) -> Var<'t> {
        x.matmul(self.p(&format!("{name}.w"))).add_row(self.p(&format!("{name}.b")))
    }

    pub fn mlp2(&self, name: &str, x: Var<'t>) -> Var<'t> {
        let h = self.linear(&format!("{name}.0"), x).relu();
        self.linear(&format!("{name}.1"), h)
    }

    pub fn layer_norm(&self, name: &str, x: Var<'t>) -> Var<'t> {
        x.layer_norm(self.p(&format!("{name}.g")), self.p(&format!("{name}.b")), 1e-5)
    }

    pub fn conv(&self, name: &str, x: Var<'t>, kernel: usize, stride: usize) -> Var<'t> {
        x.conv2d(
            self.p(&format!("{name}.w")),
            self.p(&format!("{name}.b")),
            kernel,
            stride,
            kernel / 2,
        )
    }

    /// Multi-head attention with separate query/key inputs (positions
    /// already added) and value input. Also returns the raw attention node,
    /// whose weights can be read back from the tape.
    pub fn attention(
        &self,
        name: &str,
        q_in: Var<'t>,
        k_in: Var<'t>,
        v_in: Var<'t>,
        heads: usize,
    ) -> (Var<'t>, Var<'t>) {
        let q = self.linear(&format!("{name}.q"), q_in);
        let k = self.linear(&format!("{name}.k"), k_in);
        let v = self.linear(&format!("{name}.v"), v_in);
        let a = q.attention(k, v, heads);
        (self.linear(&format!("{name}.o"), a), a)
    }
}

/// Deterministic parameter initialization.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Tensor::new(shape.to_vec(), data)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.insert(name, Tensor::new(shape.to_vec(), data));
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        self.store.insert(name, Tensor::full(shape.to_vec(), value));
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(&[fan_in, fan_out], bound);
        let b = self.uniform(&[fan_out], bound);
        self.store.insert(&format!("{name}.w"), w);
        self.store.insert(&format!("{name}.b"), b);
    }

    pub fn mlp2(&mut self, name: &str, fan_in: usize, hidden: usize, fan_out: usize) {
        self.linear(&format!("{name}.0"), fan_in, hidden);
        self.linear(&format!("{name}.1"), hidden, fan_out);
    }

    pub fn layer_norm(&mut self, name: &str, width: usize) {
        self.constant(&format!("{name}.g"), &[width], 1.0);
        self.constant(&format!("{name}.b"), &[width], 0.0);
    }

    /// He-normal conv weights (followed by ReLU almost everywhere), zero bias.
    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize) {
        let fan_in = c_in * kernel * kernel;
        self.normal(&format!("{name}.w"), &[c_out, fan_in], (2.0 / fan_in as f64).sqrt());
        self.constant(&format!("{name}.b"), &[c_out], 0.0);
    }

    pub fn attention(&mut self, name: &str, width: usize) {
        for part in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{part}"), width, width);
        }
    }
}

/// 2D sine/cosine positional encoding of continuous pixel positions. The
/// first half of the channels encodes `y`, the second half `x`; positions
/// are normalized by the image size and scaled to `[0, 2π)`.
pub fn sine_encoding(positions: &[[f64; 2]], width: usize, image_w: usize, image_h: usize) -> Tensor {
    assert!(width % 4 == 0, "positional width {width} must be a multiple of 4");
    let half = width / 2;
    let dim_t: Vec<f64> = (0..half)
        .map(|k| 10000f64.powf(2.0 * (k / 2) as f64 / half as f64))
        .collect();
    let tau = std::f64::consts::TAU;
    let mut data = Vec::with_capacity(positions.len() * width);
    for &[u, v] in positions {
        let coords = [v / image_h as f64 * tau, u / image_w as f64 * tau];
        for c in coords {
            for (k, t) in dim_t.iter().enumerate() {
                let a = c / t;
                data.push(if k % 2 == 0 { a.sin() } else { a.cos() });
            }
        }
    }
    Tensor::new([positions.len(), width], data)
}

/// Pixel position of every cell of a feature grid with the given stride,
/// row-major.
pub fn grid_positions(grid_w: usize, grid_h: usize, stride: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(grid_w * grid_h);
    for i in 0..grid_h {
        for j in 0..grid_w {
            out.push([(j * stride) as f64, (i * stride) as f64]);
        }
    }
    out
}

/// Bilinear taps for sampling a row-major `w × h` grid at continuous grid
/// coordinates `(x, y)`, clamped to the grid.
pub fn bilinear_taps(x: f64, y: f64, w: usize, h: usize) -> Taps {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let idx = |xx: usize, yy: usize| (yy * w + xx) as u32;
    [
        (idx(x0, y0), (1.0 - fx) * (1.0 - fy)),
        (idx(x1, y0), fx * (1.0 - fy)),
        (idx(x0, y1), (1.0 - fx) * fy),
        (idx(x1, y1), fx * fy),
    ]
}

/// Taps that upsample a `w × h` grid by an integer factor; output pixel
/// `(u, v)` samples input coordinate `(u / f, v / f)`.
pub fn upsample_taps(w: usize, h: usize, factor: usize) -> Rc<Vec<Taps>> {
    let (ow, oh) = (w * factor, h * factor);
    let f = factor as f64;
    let mut taps = Vec::with_capacity(ow * oh);
    for v in 0..oh {
        for u in 0..ow {
            taps.push(bilinear_taps(u as f64 / f, v as f64 / f, w, h));
        }
    }
    Rc::new(taps)
}
