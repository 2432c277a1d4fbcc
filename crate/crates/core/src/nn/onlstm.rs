//! Ordered-neurons LSTM cell and stacks.
//!
//! Hidden units are grouped into `hidden / chunk` levels. Two master gates,
//! built as a cumulative sum of a softmax over levels, impose an order on
//! updates: the master forget gate is non-decreasing over levels, so high
//! levels keep long-term information while low levels are overwritten.

use rand::Rng;

use super::layers::Linear;
use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Result, SgnError};

#[derive(Clone, Debug)]
pub struct OrderedNeuronsCell {
    pub input: usize,
    pub hidden: usize,
    pub chunk: usize,
    gates: Linear,
}

/// One cell update.
#[derive(Clone, Copy, Debug)]
pub struct CellStep {
    pub h: Var,
    pub c: Var,
    /// Master forget activations, `rows x levels`.
    pub master_forget: Var,
}

impl OrderedNeuronsCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, chunk: usize, rng: &mut impl Rng) -> Result<Self> {
        if chunk == 0 || hidden % chunk != 0 {
            return Err(SgnError::Config(format!("hidden size {hidden} is not divisible by chunk factor {chunk}")));
        }
        let levels = hidden / chunk;
        let gates = Linear::new(store, &format!("{name}.gates"), input + hidden, 4 * hidden + 2 * levels, rng);
        Ok(Self { input, hidden, chunk, gates })
    }

    pub fn levels(&self) -> usize {
        self.hidden / self.chunk
    }

    pub fn gates(&self) -> &Linear {
        &self.gates
    }

    pub fn step(&self, tape: &mut Tape, x: Var, h: Var, c: Var) -> Result<CellStep> {
        let (rows, xin) = tape.shape(x);
        if xin != self.input || tape.shape(h) != (rows, self.hidden) || tape.shape(c) != (rows, self.hidden) {
            return Err(SgnError::Shape(format!(
                "cell expects input {} and state {}, got x {:?}, h {:?}, c {:?}",
                self.input,
                self.hidden,
                tape.shape(x),
                tape.shape(h),
                tape.shape(c)
            )));
        }
        let (hd, lv) = (self.hidden, self.levels());
        let xh = tape.concat_cols(&[x, h]);
        let z = self.gates.forward(tape, xh);

        let mf_logits = tape.slice_cols(z, 0, lv);
        let mi_logits = tape.slice_cols(z, lv, lv);
        let mf_soft = tape.softmax_rows(mf_logits, None);
        let master_forget = tape.cumsum_cols(mf_soft);
        let mi_soft = tape.softmax_rows(mi_logits, None);
        let mi_cum = tape.cumsum_cols(mi_soft);
        let master_input = tape.one_minus(mi_cum);

        let f_logits = tape.slice_cols(z, 2 * lv, hd);
        let i_logits = tape.slice_cols(z, 2 * lv + hd, hd);
        let o_logits = tape.slice_cols(z, 2 * lv + 2 * hd, hd);
        let cand_logits = tape.slice_cols(z, 2 * lv + 3 * hd, hd);
        let f = tape.sigmoid(f_logits);
        let i = tape.sigmoid(i_logits);
        let o = tape.sigmoid(o_logits);
        let cand = tape.tanh(cand_logits);

        let mf = tape.repeat_cols(master_forget, self.chunk);
        let mi = tape.repeat_cols(master_input, self.chunk);
        let overlap = tape.mul(mf, mi);
        let f_ov = tape.mul(f, overlap);
        let mf_rest = tape.sub(mf, overlap);
        let f_hat = tape.add(f_ov, mf_rest);
        let i_ov = tape.mul(i, overlap);
        let mi_rest = tape.sub(mi, overlap);
        let i_hat = tape.add(i_ov, mi_rest);

        let keep = tape.mul(f_hat, c);
        let write = tape.mul(i_hat, cand);
        let c_next = tape.add(keep, write);
        let squashed = tape.tanh(c_next);
        let h_next = tape.mul(o, squashed);
        Ok(CellStep { h: h_next, c: c_next, master_forget })
    }
}

/// Output of running a stack over a (possibly ragged) batch of sequences.
#[derive(Clone, Debug)]
pub struct StackRun {
    /// Top-layer hidden state after each step.
    pub outputs: Vec<Var>,
    /// Top-layer hidden state after each row's last valid step.
    pub final_h: Var,
    /// `master_forget[layer][step]`, each `rows x levels`.
    pub master_forget: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct OnLstmStack {
    pub cells: Vec<OrderedNeuronsCell>,
}

impl OnLstmStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        chunk: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cells = (0..layers)
            .map(|l| {
                let inp = if l == 0 { input } else { hidden };
                OrderedNeuronsCell::new(store, &format!("{name}.layer{l}"), inp, hidden, chunk, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cells })
    }

    pub fn hidden(&self) -> usize {
        self.cells.last().map_or(0, |c| c.hidden)
    }

    /// Runs from zero state. `lengths[r]` is the number of valid steps of
    /// row `r`; rows past their length keep their state frozen.
    pub fn run(&self, tape: &mut Tape, steps: &[Var], lengths: &[usize]) -> Result<StackRun> {
        if steps.is_empty() {
            return Err(SgnError::Input("empty sequence".into()));
        }
        let rows = tape.shape(steps[0]).0;
        assert_eq!(rows, lengths.len());
        let ragged = lengths.iter().any(|&l| l != steps.len());
        let mut hs: Vec<Var> = Vec::new();
        let mut cs: Vec<Var> = Vec::new();
        for cell in &self.cells {
            hs.push(tape.constant(Tensor::zeros(rows, cell.hidden)));
            cs.push(tape.constant(Tensor::zeros(rows, cell.hidden)));
        }
        let mut outputs = Vec::with_capacity(steps.len());
        let mut master_forget = vec![Vec::with_capacity(steps.len()); self.cells.len()];
        for (t, &x) in steps.iter().enumerate() {
            let mask = ragged.then(|| {
                let m = Tensor::from_vec(rows, 1, lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect());
                let inv = m.map(|v| 1.0 - v);
                (tape.constant(m), tape.constant(inv))
            });
            let mut input = x;
            for (l, cell) in self.cells.iter().enumerate() {
                let step = cell.step(tape, input, hs[l], cs[l])?;
                master_forget[l].push(step.master_forget);
                let (h, c) = match mask {
                    Some((m, inv)) => (blend(tape, m, inv, step.h, hs[l]), blend(tape, m, inv, step.c, cs[l])),
                    None => (step.h, step.c),
                };
                hs[l] = h;
                cs[l] = c;
                input = h;
            }
            outputs.push(input);
        }
        Ok(StackRun { outputs, final_h: *hs.last().unwrap(), master_forget })
    }
}

/// `mask * new + (1 - mask) * old` with a `rows x 1` 0/1 mask; exact for
/// both mask values.
fn blend(tape: &mut Tape, mask: Var, inverse: Var, new: Var, old: Var) -> Var {
    let a = tape.mul_col(new, mask);
    let b = tape.mul_col(old, inverse);
    tape.add(a, b)
}

/// Expected forget depth per step: `levels - sum_k master_forget[k]`.
/// Higher values mark stronger boundaries.
pub fn syntactic_distance(trace: &[Vec<f64>]) -> Vec<f64> {
    trace.iter().map(|mf| mf.len() as f64 - mf.iter().sum::<f64>()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_indivisible_chunk() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(OrderedNeuronsCell::new(&mut store, "c", 3, 10, 4, &mut rng).is_err());
    }

    #[test]
    fn zero_weights_zero_input_gives_zero_hidden() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = OrderedNeuronsCell::new(&mut store, "c", 3, 8, 2, &mut rng).unwrap();
        let w = cell.gates().weight;
        store.value_mut(w).data.iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(1, 3));
        let h = tape.constant(Tensor::zeros(1, 8));
        let c = tape.constant(Tensor::zeros(1, 8));
        let out = cell.step(&mut tape, x, h, c).unwrap();
        assert!(tape.value(out.h).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn master_forget_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for draw in 0..100 {
            let mut store = ParamStore::new();
            let cell = OrderedNeuronsCell::new(&mut store, "c", 4, 12, 3, &mut rng).unwrap();
            let w = cell.gates().weight;
            store.value_mut(w).data.iter_mut().for_each(|v| *v *= 1.0 + draw as f64 * 0.05);
            let mut tape = Tape::new(&store);
            let xs: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x = tape.constant(Tensor::from_vec(2, 4, xs));
            let h = tape.constant(Tensor::from_vec(2, 12, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()));
            let c = tape.constant(Tensor::zeros(2, 12));
            let out = cell.step(&mut tape, x, h, c).unwrap();
            let mf = tape.value(out.master_forget);
            for r in 0..mf.rows {
                for pair in mf.row(r).windows(2) {
                    assert!(pair[1] >= pair[0] - 1e-15);
                }
                assert!((mf.row(r).last().unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = OrderedNeuronsCell::new(&mut store, "c", 3, 8, 2, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(1, 5));
        let h = tape.constant(Tensor::zeros(1, 8));
        let c = tape.constant(Tensor::zeros(1, 8));
        assert!(matches!(cell.step(&mut tape, x, h, c), Err(SgnError::Shape(_))));
    }

    #[test]
    fn distance_endpoints() {
        assert_eq!(syntactic_distance(&[vec![1.0; 4], vec![1.0; 4]]), vec![0.0, 0.0]);
        assert_eq!(syntactic_distance(&[vec![0.0; 4]]), vec![4.0]);
    }

    #[test]
    fn ragged_rows_freeze_after_their_length() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = OnLstmStack::new(&mut store, "s", 3, 6, 2, 2, &mut rng).unwrap();
        let inputs: Vec<Tensor> =
            (0..4).map(|_| Tensor::from_vec(2, 3, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect();
        let mut tape = Tape::new(&store);
        let steps: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let run = stack.run(&mut tape, &steps, &[2, 4]).unwrap();
        let ragged_final = tape.value(run.final_h).clone();

        let mut tape2 = Tape::new(&store);
        let short: Vec<Var> = inputs[..2].iter().map(|t| tape2.constant(t.clone())).collect();
        let run2 = stack.run(&mut tape2, &short, &[2, 2]).unwrap();
        assert_eq!(ragged_final.row(0), tape2.value(run2.final_h).row(0));
    }

    #[test]
    fn stack_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stack = OnLstmStack::new(&mut store, "s", 3, 8, 2, 2, &mut rng).unwrap();
        let inputs: Vec<Tensor> =
            (0..3).map(|_| Tensor::from_vec(2, 3, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect();
        let report = check_gradients(
            &mut store,
            |tape| {
                let steps: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
                let run = stack.run(tape, &steps, &[3, 2]).unwrap();
                let mf = run.master_forget[1][2];
                let a = tape.sum_all(run.final_h);
                let b = tape.sum_all(mf);
                let sq = tape.mul(run.final_h, run.final_h);
                let s = tape.sum_all(sq);
                let ab = tape.add(a, b);
                tape.add(ab, s)
            },
            1e-5,
            40,
            &mut rng,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
