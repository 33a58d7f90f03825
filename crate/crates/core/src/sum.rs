//! Compensated summation in fixed ascending-index order.
//!
//! Every sum that defines a reported value goes through here so that
//! algebraic identities between reported values hold to a few ulps and the
//! result never depends on how work was scheduled.

/// Neumaier's variant of Kahan summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

impl Extend<f64> for CompensatedSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.add(x);
        }
    }
}

pub fn sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = CompensatedSum::new();
    acc.extend(values);
    acc.total()
}

/// `(1/n) Σ values`, with `n` supplied by the caller.
pub fn mean_over<I: IntoIterator<Item = f64>>(values: I, n: usize) -> f64 {
    sum(values) / n as f64
}

pub fn mean(values: &[f64]) -> f64 {
    mean_over(values.iter().copied(), values.len())
}
