//! An `f64` wrapper that counts every multiplication on the current thread.

use std::cell::Cell;
use std::cmp::Ordering;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::tensor::Scalar;

thread_local! {
    static MULTIPLIES: Cell<u64> = const { Cell::new(0) };
}

fn bump() {
    MULTIPLIES.with(|c| c.set(c.get() + 1));
}

/// Runs `f` and returns its result with the number of [`Counted`]
/// multiplications it performed on this thread.
pub fn count_multiplies<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = MULTIPLIES.with(Cell::get);
    let r = f();
    (r, MULTIPLIES.with(Cell::get) - before)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Counted(pub f64);

impl PartialEq for Counted {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

impl PartialOrd for Counted {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.0.partial_cmp(&other.0)
    }
}

impl Add for Counted {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self(self.0 + rhs.0)
    }
}

impl Sub for Counted {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self(self.0 - rhs.0)
    }
}

impl Mul for Counted {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        bump();
        Self(self.0 * rhs.0)
    }
}

impl Div for Counted {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        Self(self.0 / rhs.0)
    }
}

impl Neg for Counted {
    type Output = Self;
    fn neg(self) -> Self {
        Self(-self.0)
    }
}

impl AddAssign for Counted {
    fn add_assign(&mut self, rhs: Self) {
        self.0 += rhs.0;
    }
}

impl SubAssign for Counted {
    fn sub_assign(&mut self, rhs: Self) {
        self.0 -= rhs.0;
    }
}

impl MulAssign for Counted {
    fn mul_assign(&mut self, rhs: Self) {
        bump();
        self.0 *= rhs.0;
    }
}

impl Scalar for Counted {
    fn zero() -> Self {
        Self(0.0)
    }
    fn one() -> Self {
        Self(1.0)
    }
    fn from_f64(v: f64) -> Self {
        Self(v)
    }
    fn to_f64(self) -> f64 {
        self.0
    }
}
