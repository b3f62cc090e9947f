//! Explicit Runge-Kutta steppers for autonomous systems `x' = f(x)`.
//!
//! Inputs are held constant over a step, so the right-hand side is treated as
//! time-independent within one call.

/// Classic fixed-step RK4.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(n: usize) -> Self {
        Rk4 {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    /// Advances `x` by `h`, with `k1 = f(x)` supplied by the caller.
    pub fn step_with_k1<F>(&mut self, f: &mut F, x: &mut [f64], k1: &[f64], h: f64)
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        self.k1.copy_from_slice(k1);
        self.advance(f, x, h);
    }

    pub fn step<F>(&mut self, f: &mut F, x: &mut [f64], h: f64)
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        f(x, &mut self.k1);
        self.advance(f, x, h);
    }

    fn advance<F>(&mut self, f: &mut F, x: &mut [f64], h: f64)
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let n = x.len();
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        f(&self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        f(&self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        f(&self.tmp, &mut self.k4);
        for i in 0..n {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

// Fehlberg 4(5) tableau.
const A21: f64 = 1.0 / 4.0;
const A31: f64 = 3.0 / 32.0;
const A32: f64 = 9.0 / 32.0;
const A41: f64 = 1932.0 / 2197.0;
const A42: f64 = -7200.0 / 2197.0;
const A43: f64 = 7296.0 / 2197.0;
const A51: f64 = 439.0 / 216.0;
const A52: f64 = -8.0;
const A53: f64 = 3680.0 / 513.0;
const A54: f64 = -845.0 / 4104.0;
const A61: f64 = -8.0 / 27.0;
const A62: f64 = 2.0;
const A63: f64 = -3544.0 / 2565.0;
const A64: f64 = 1859.0 / 4104.0;
const A65: f64 = -11.0 / 40.0;

const B1: f64 = 16.0 / 135.0;
const B3: f64 = 6656.0 / 12825.0;
const B4: f64 = 28561.0 / 56430.0;
const B5: f64 = -9.0 / 50.0;
const B6: f64 = 2.0 / 55.0;

// fifth-order minus fourth-order weights
const E1: f64 = 1.0 / 360.0;
const E3: f64 = -128.0 / 4275.0;
const E4: f64 = -2197.0 / 75240.0;
const E5: f64 = 1.0 / 50.0;
const E6: f64 = 2.0 / 55.0;

/// Outcome of one adaptive step attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub accepted: bool,
    /// Scaled error norm; `<= 1` means accepted.
    pub error: f64,
    /// Suggested size for the next attempt.
    pub h_next: f64,
}

/// Adaptive Runge-Kutta-Fehlberg 4(5), propagating the fifth-order solution.
#[derive(Debug, Clone)]
pub struct Rkf45 {
    pub rtol: f64,
    pub atol: f64,
    k: [Vec<f64>; 6],
    tmp: Vec<f64>,
    xnew: Vec<f64>,
}

impl Rkf45 {
    pub fn new(n: usize, rtol: f64, atol: f64) -> Self {
        Rkf45 {
            rtol,
            atol,
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            xnew: vec![0.0; n],
        }
    }

    /// Attempts a step of size `h` from `x`, with `k1 = f(x)` supplied. On
    /// acceptance `x` is overwritten with the new state.
    pub fn try_step<F>(&mut self, f: &mut F, x: &mut [f64], k1: &[f64], h: f64) -> StepOutcome
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let n = x.len();
        let [k1b, k2, k3, k4, k5, k6] = &mut self.k;
        k1b.copy_from_slice(k1);
        let tmp = &mut self.tmp;

        for i in 0..n {
            tmp[i] = x[i] + h * A21 * k1b[i];
        }
        f(tmp, k2);
        for i in 0..n {
            tmp[i] = x[i] + h * (A31 * k1b[i] + A32 * k2[i]);
        }
        f(tmp, k3);
        for i in 0..n {
            tmp[i] = x[i] + h * (A41 * k1b[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(tmp, k4);
        for i in 0..n {
            tmp[i] = x[i] + h * (A51 * k1b[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(tmp, k5);
        for i in 0..n {
            tmp[i] = x[i]
                + h * (A61 * k1b[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        f(tmp, k6);

        let mut err: f64 = 0.0;
        for i in 0..n {
            let xn = x[i] + h * (B1 * k1b[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
            self.xnew[i] = xn;
            let e = h * (E1 * k1b[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i]);
            let scale = self.atol + self.rtol * x[i].abs().max(xn.abs());
            err = err.max((e / scale).abs());
        }
        if !err.is_finite() {
            return StepOutcome {
                accepted: false,
                error: err,
                h_next: 0.25 * h,
            };
        }
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        let accepted = err <= 1.0;
        if accepted {
            x.copy_from_slice(&self.xnew);
        }
        StepOutcome {
            accepted,
            error: err,
            h_next: h * if accepted { factor } else { factor.min(1.0) },
        }
    }
}
