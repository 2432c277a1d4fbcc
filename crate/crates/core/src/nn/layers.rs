use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};

/// `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), input, output, rng);
        let bias = Some(store.add_zeros(format!("{name}.bias"), 1, output));
        Self { weight, bias, input, output }
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), input, output, rng);
        Self { weight, bias: None, input, output }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub width: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, count: usize, width: usize, rng: &mut impl Rng) -> Self {
        let table = store.add_normal(format!("{name}.table"), count, width, 0.1, rng);
        Self { table, count, width }
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[usize]) -> Var {
        let t = tape.param(self.table);
        tape.gather_rows(t, ids)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add_filled(format!("{name}.gain"), 1, width, 1.0);
        let bias = store.add_zeros(format!("{name}.bias"), 1, width);
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }
}
