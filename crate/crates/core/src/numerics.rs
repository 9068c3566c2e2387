//! Log-space helpers shared by the oracle, BP and the estimators.

/// `log(sum(exp(values)))` with max subtraction. Empty input gives `-inf`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// In-place log-softmax.
pub fn log_softmax_in_place(values: &mut [f64]) {
    let lse = logsumexp(values);
    values.iter_mut().for_each(|v| *v -= lse);
}

pub fn log_softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    log_softmax_in_place(&mut out);
    out
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let lse = logsumexp(values);
    values.iter().map(|&v| (v - lse).exp()).collect()
}

/// Dot product with four independent accumulators, which lets the compiler
/// vectorize it. Summation order is fixed, so results are deterministic.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Streaming log-sum-exp accumulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogSumExpAcc {
    max: f64,
    scaled_sum: f64,
}

impl Default for LogSumExpAcc {
    fn default() -> Self {
        LogSumExpAcc { max: f64::NEG_INFINITY, scaled_sum: 0.0 }
    }
}

impl LogSumExpAcc {
    #[inline]
    pub fn add(&mut self, x: f64) {
        if x <= self.max {
            self.scaled_sum += (x - self.max).exp();
        } else {
            self.scaled_sum = self.scaled_sum * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    pub fn merge(&mut self, other: &LogSumExpAcc) {
        if other.max == f64::NEG_INFINITY {
            return;
        }
        if other.max <= self.max {
            self.scaled_sum += other.scaled_sum * (other.max - self.max).exp();
        } else {
            self.scaled_sum = self.scaled_sum * (self.max - other.max).exp() + other.scaled_sum;
            self.max = other.max;
        }
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.scaled_sum.ln()
        }
    }
}
