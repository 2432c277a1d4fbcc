use rand::Rng;

use super::layers::Linear;
use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Result, SgnError};

/// Gated recurrent unit.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    from_input: Linear,
    from_hidden: Linear,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let from_input = Linear::new(store, &format!("{name}.input"), input, 3 * hidden, rng);
        let from_hidden = Linear::new(store, &format!("{name}.hidden"), hidden, 3 * hidden, rng);
        Self { input, hidden, from_input, from_hidden }
    }

    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let rows = tape.shape(x).0;
        if tape.shape(x).1 != self.input || tape.shape(h) != (rows, self.hidden) {
            return Err(SgnError::Shape(format!(
                "gru expects input {} and hidden {}, got {:?} and {:?}",
                self.input,
                self.hidden,
                tape.shape(x),
                tape.shape(h)
            )));
        }
        let hd = self.hidden;
        let gx = self.from_input.forward(tape, x);
        let gh = self.from_hidden.forward(tape, h);
        let (xr, xz, xn) = (tape.slice_cols(gx, 0, hd), tape.slice_cols(gx, hd, hd), tape.slice_cols(gx, 2 * hd, hd));
        let (hr, hz, hn) = (tape.slice_cols(gh, 0, hd), tape.slice_cols(gh, hd, hd), tape.slice_cols(gh, 2 * hd, hd));
        let r_in = tape.add(xr, hr);
        let r = tape.sigmoid(r_in);
        let z_in = tape.add(xz, hz);
        let z = tape.sigmoid(z_in);
        let gated = tape.mul(r, hn);
        let n_in = tape.add(xn, gated);
        let n = tape.tanh(n_in);
        // h' = n + z * (h - n)
        let diff = tape.sub(h, n);
        let kept = tape.mul(z, diff);
        Ok(tape.add(n, kept))
    }
}
