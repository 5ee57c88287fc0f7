/// Sum of non-negative fractions, kept exact while it fits in `u128` and
/// tracked in `f64` alongside.
#[derive(Debug, Clone, Copy)]
pub struct FractionSum {
    exact: Option<(u128, u128)>,
    approx: f64,
}

impl Default for FractionSum {
    fn default() -> Self {
        Self {
            exact: Some((0, 1)),
            approx: 0.0,
        }
    }
}

impl PartialEq for FractionSum {
    fn eq(&self, other: &Self) -> bool {
        match (self.exact, other.exact) {
            (Some(a), Some(b)) => a == b,
            _ => self.to_f64() == other.to_f64(),
        }
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn reduce(num: u128, den: u128) -> (u128, u128) {
    let g = gcd(num, den).max(1);
    (num / g, den / g)
}

fn add_exact((a, b): (u128, u128), (c, d): (u128, u128)) -> Option<(u128, u128)> {
    let g = gcd(b, d);
    let lcm = b.checked_mul(d / g)?;
    let num = a.checked_mul(lcm / b)?.checked_add(c.checked_mul(lcm / d)?)?;
    Some(reduce(num, lcm))
}

impl std::ops::Add for FractionSum {
    type Output = Self;

    fn add(self, other: Self) -> Self {
        Self {
            exact: self.exact.zip(other.exact).and_then(|(x, y)| add_exact(x, y)),
            approx: self.approx + other.approx,
        }
    }
}

impl std::ops::AddAssign for FractionSum {
    fn add_assign(&mut self, other: Self) {
        *self = *self + other;
    }
}

impl FractionSum {
    pub fn of(num: u64, den: u64) -> Self {
        debug_assert!(den > 0);
        Self {
            exact: Some(reduce(u128::from(num), u128::from(den))),
            approx: num as f64 / den as f64,
        }
    }

    pub fn to_f64(self) -> f64 {
        match self.exact {
            Some((n, d)) => n as f64 / d as f64,
            None => self.approx,
        }
    }

    /// `self * scale / divisor` with a single final rounding when exact.
    pub fn scaled_ratio(self, scale: u64, divisor: u64) -> f64 {
        if divisor == 0 {
            return 0.0;
        }
        if let Some((n, d)) = self.exact {
            if let (Some(num), Some(den)) = (n.checked_mul(u128::from(scale)), d.checked_mul(u128::from(divisor))) {
                let (num, den) = reduce(num, den);
                return num as f64 / den as f64;
            }
        }
        self.approx * scale as f64 / divisor as f64
    }
}
