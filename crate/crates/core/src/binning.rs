/// Equal-width bins over a closed range; the upper edge falls in the last bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EqualWidthBins {
    lo: f64,
    hi: f64,
    n: usize,
}

impl EqualWidthBins {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        assert!(n >= 1, "at least one bin");
        assert!(lo <= hi, "bin range must be ordered");
        Self { lo, hi, n }
    }

    /// Bins spanning the finite values of `values`, or `None` if there are none.
    pub fn spanning(values: impl IntoIterator<Item = f64>, n: usize) -> Option<Self> {
        let (lo, hi) = values
            .into_iter()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        (lo <= hi).then(|| Self::new(lo, hi, n))
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.n as f64
    }

    pub fn center(&self, bin: usize) -> f64 {
        self.lo + (bin as f64 + 0.5) * self.width()
    }

    /// Bin of `x`, clamped into range.
    pub fn index(&self, x: f64) -> usize {
        let w = self.width();
        if w <= 0.0 || x <= self.lo {
            return 0;
        }
        (((x - self.lo) / w) as usize).min(self.n - 1)
    }
}
