//! Numpy-style broadcasting for binary elementwise ops.

use crate::error::{Result, TensorError};
use crate::tensor::{strides, Tensor};

/// Index mapping from a broadcast output back into both operands.
pub(crate) struct Plan {
    pub out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    same: bool,
}

impl Plan {
    pub fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Self {
                out_shape: a.to_vec(),
                a_strides: vec![],
                b_strides: vec![],
                same: true,
            });
        }
        let nd = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; nd - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(nd);
        for (&x, &y) in pa.iter().zip(&pb) {
            out.push(match (x, y) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(TensorError::shape(
                        op,
                        format!("cannot broadcast {a:?} with {b:?}"),
                    ))
                }
            });
        }
        let eff = |p: &[usize]| {
            let s = strides(p);
            p.iter()
                .zip(s)
                .map(|(&d, st)| if d == 1 { 0 } else { st })
                .collect::<Vec<_>>()
        };
        Ok(Self {
            a_strides: eff(&pa),
            b_strides: eff(&pb),
            out_shape: out,
            same: false,
        })
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in
    /// row-major order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n: usize = self.out_shape.iter().product();
        if self.same {
            for i in 0..n {
                f(i, i, i);
            }
            return;
        }
        let nd = self.out_shape.len();
        let mut idx = vec![0usize; nd];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..n {
            f(o, ia, ib);
            for d in (0..nd).rev() {
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                ia -= self.a_strides[d] * idx[d];
                ib -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

pub(crate) fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let plan = Plan::new(op, a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; plan.out_shape.iter().product()];
    plan.for_each(|o, i, j| out[o] = f(ad[i], bd[j]));
    Tensor::new(&plan.out_shape, out)
}

/// Backward of a broadcast binary op: `da`/`db` give the local partials at
/// each output element; results are summed back to the operand shapes.
pub(crate) fn binary_grads(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    want: (bool, bool),
    da: impl Fn(f64, f64) -> f64,
    db: impl Fn(f64, f64) -> f64,
) -> (Option<Tensor>, Option<Tensor>) {
    let plan = Plan::new("backward", a.shape(), b.shape()).expect("shapes checked on forward");
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let mut ga = want.0.then(|| vec![0.0; a.len()]);
    let mut gb = want.1.then(|| vec![0.0; b.len()]);
    plan.for_each(|o, i, j| {
        if let Some(ga) = ga.as_mut() {
            ga[i] += gd[o] * da(ad[i], bd[j]);
        }
        if let Some(gb) = gb.as_mut() {
            gb[j] += gd[o] * db(ad[i], bd[j]);
        }
    });
    (
        ga.map(|v| Tensor::new(a.shape(), v).unwrap()),
        gb.map(|v| Tensor::new(b.shape(), v).unwrap()),
    )
}
