use crate::element::Element;
use crate::tape::{Op, Tape, UnaryKind, Var};
use crate::tensor::Tensor;

#[inline]
fn sigmoid<F: Element>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn gelu<F: Element>(x: F) -> F {
    let half = F::lit(0.5);
    half * x * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<F: Element>(x: F) -> F {
    let half = F::lit(0.5);
    let cdf = half * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * F::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

impl<F: Element> Tape<F> {
    fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let xv = self.value(x);
        let out = match kind {
            UnaryKind::Silu => xv.map(|v| v * sigmoid(v)),
            UnaryKind::Gelu => xv.map(gelu),
            UnaryKind::Sigmoid => xv.map(sigmoid),
            UnaryKind::Atan => xv.map(|v| v.atan()),
            UnaryKind::Sqrt => xv.map(|v| v.sqrt()),
            UnaryKind::Square => xv.map(|v| v * v),
            UnaryKind::Exp => xv.map(|v| v.exp()),
            UnaryKind::ClampMin(lo) => {
                let lo = F::lit(lo);
                xv.map(|v| if v > lo { v } else { lo })
            }
        };
        let rg = self.requires_grad(x);
        self.push(out, Op::Unary { x, kind }, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Silu)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn atan(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Atan)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Square)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }

    /// `max(x, lo)` elementwise; the gradient is zero where clamped.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(x, UnaryKind::ClampMin(lo))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = F::lit(s);
        let out = self.value(x).map(|v| v * s);
        let rg = self.requires_grad(x);
        self.push(out, Op::Scale { x, s }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = F::lit(c);
        let out = self.value(x).map(|v| v + c);
        let rg = self.requires_grad(x);
        self.push(out, Op::Shift { x }, rg)
    }

    /// `a + b`, where `b` may be smaller than `a` and is repeated cyclically.
    ///
    /// This covers the trailing-axis broadcast `[.., *b.shape] + b`, e.g. a
    /// per-head bias table added to every window's attention logits.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let lb = bv.numel();
        assert!(
            lb > 0 && av.numel() % lb == 0,
            "add: {:?} does not broadcast against {:?}",
            bv.shape(),
            av.shape()
        );
        let bd = bv.data();
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_mut(lb) {
            for (o, &bb) in chunk.iter_mut().zip(bd) {
                *o += bb;
            }
        }
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add { a, b }, rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>, name: &str) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "{name}: shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape(), data).expect("same shape");
        let rg = self.any_grad(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b }, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div { a, b }, "div")
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| if x >= y { x } else { y }, Op::Maximum { a, b }, "maximum")
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| if x <= y { x } else { y }, Op::Minimum { a, b }, "minimum")
    }
}

pub(crate) fn backward_unary<F: Element>(
    tape: &Tape<F>,
    x: Var,
    y: &Tensor<F>,
    kind: UnaryKind,
    g: &Tensor<F>,
) -> Tensor<F> {
    let xv = tape.value(x);
    let mut out = g.clone();
    let xs = xv.data();
    let ys = y.data();
    let od = out.data_mut();
    match kind {
        UnaryKind::Silu => {
            for i in 0..od.len() {
                let s = sigmoid(xs[i]);
                od[i] *= s * (F::one() + xs[i] * (F::one() - s));
            }
        }
        UnaryKind::Gelu => {
            for i in 0..od.len() {
                od[i] *= gelu_grad(xs[i]);
            }
        }
        UnaryKind::Sigmoid => {
            for i in 0..od.len() {
                od[i] *= ys[i] * (F::one() - ys[i]);
            }
        }
        UnaryKind::Atan => {
            for i in 0..od.len() {
                od[i] /= F::one() + xs[i] * xs[i];
            }
        }
        UnaryKind::Sqrt => {
            for i in 0..od.len() {
                od[i] = od[i] * F::lit(0.5) / ys[i];
            }
        }
        UnaryKind::Square => {
            for i in 0..od.len() {
                od[i] *= F::lit(2.0) * xs[i];
            }
        }
        UnaryKind::Exp => {
            for i in 0..od.len() {
                od[i] *= ys[i];
            }
        }
        UnaryKind::ClampMin(lo) => {
            let lo = F::lit(lo);
            for i in 0..od.len() {
                if xs[i] <= lo {
                    od[i] = F::zero();
                }
            }
        }
    }
    out
}

pub(crate) fn backward_add_broadcast<F: Element>(g: &Tensor<F>, b_shape: &[usize]) -> Tensor<F> {
    let mut gb = Tensor::zeros(b_shape);
    let lb = gb.numel();
    {
        let gbd = gb.data_mut();
        for chunk in g.data().chunks(lb) {
            for (acc, &v) in gbd.iter_mut().zip(chunk) {
                *acc += v;
            }
        }
    }
    gb
}

pub(crate) fn zip_map<F: Element>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

pub(crate) fn zip3_map<F: Element>(
    g: &Tensor<F>,
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F, F) -> F,
) -> Tensor<F> {
    let data = g
        .data()
        .iter()
        .zip(a.data().iter().zip(b.data()))
        .map(|(&gv, (&x, &y))| f(gv, x, y))
        .collect();
    Tensor::new(g.shape(), data).expect("same shape")
}
