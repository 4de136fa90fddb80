//! Scalar abstraction shared by every forward pass.

use std::cell::Cell;
use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_traits::{Float, One, Zero};
use serde::Serialize;

use crate::expsum::ExpSum;

/// Real scalar usable in blocks and constructions.
///
/// Implemented for `f32`, `f64`, the exact [`ExpSum`], and the op-tallying
/// [`Counted`] wrapper.
pub trait Scalar:
    Clone
    + Debug
    + PartialEq
    + PartialOrd
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Send
    + Sync
    + 'static
{
    /// Whether arithmetic is exact (no rounding) for this type.
    const EXACT: bool;

    fn from_f64(x: f64) -> Self;
    fn to_f64(&self) -> f64;
    fn exp(&self) -> Self;
    fn is_finite(&self) -> bool;
    /// Conversion from an exact construction weight.
    fn from_exact(x: &ExpSum) -> Self;

    fn relu(&self) -> Self {
        if *self > Self::zero() {
            self.clone()
        } else {
            Self::zero()
        }
    }

    fn abs(&self) -> Self {
        if *self < Self::zero() {
            -self.clone()
        } else {
            self.clone()
        }
    }

    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
}

macro_rules! float_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const EXACT: bool = false;
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(&self) -> f64 {
                *self as f64
            }
            fn exp(&self) -> Self {
                Float::exp(*self)
            }
            fn is_finite(&self) -> bool {
                Float::is_finite(*self)
            }
            fn from_exact(x: &ExpSum) -> Self {
                x.to_f64() as $t
            }
            fn relu(&self) -> Self {
                Float::max(*self, 0.0)
            }
        }
    };
}

float_scalar!(f32);
float_scalar!(f64);

impl Scalar for ExpSum {
    const EXACT: bool = true;
    fn from_f64(x: f64) -> Self {
        ExpSum::from_f64(x)
    }
    fn to_f64(&self) -> f64 {
        ExpSum::to_f64(self)
    }
    fn exp(&self) -> Self {
        ExpSum::exp(self)
    }
    fn is_finite(&self) -> bool {
        true
    }
    fn from_exact(x: &ExpSum) -> Self {
        x.clone()
    }
    fn relu(&self) -> Self {
        if self.signum_i8() > 0 {
            self.clone()
        } else {
            ExpSum::zero()
        }
    }
    fn from_usize(n: usize) -> Self {
        ExpSum::from_int(n as i64)
    }
}

/// Operation tally in the taxonomy of the VC-dimension argument: one unit
/// per exponential, per arithmetic operation and per comparison jump.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Tally {
    pub exponentials: u64,
    pub arithmetic: u64,
    pub jumps: u64,
}

impl Tally {
    pub fn total(&self) -> u64 {
        self.exponentials + self.arithmetic + self.jumps
    }
}

impl Add for Tally {
    type Output = Tally;
    fn add(self, o: Tally) -> Tally {
        Tally {
            exponentials: self.exponentials + o.exponentials,
            arithmetic: self.arithmetic + o.arithmetic,
            jumps: self.jumps + o.jumps,
        }
    }
}

thread_local! {
    static TALLY: Cell<Tally> = Cell::new(Tally::default());
}

fn bump(f: impl FnOnce(&mut Tally)) {
    TALLY.with(|c| {
        let mut t = c.get();
        f(&mut t);
        c.set(t);
    });
}

/// Resets this thread's tally and returns the previous value.
pub fn take_tally() -> Tally {
    TALLY.with(|c| c.replace(Tally::default()))
}

/// A scalar that records every operation applied to it in a thread-local
/// [`Tally`]. Constants are created with [`Counted::new`] free of charge.
#[derive(Clone, Debug, PartialEq, PartialOrd)]
pub struct Counted<T>(pub T);

impl<T: Scalar> Counted<T> {
    pub fn new(x: T) -> Self {
        Counted(x)
    }
    pub fn into_inner(self) -> T {
        self.0
    }
}

macro_rules! counted_binop {
    ($tr:ident $m:ident) => {
        impl<T: Scalar> $tr for Counted<T> {
            type Output = Counted<T>;
            fn $m(self, rhs: Counted<T>) -> Counted<T> {
                bump(|t| t.arithmetic += 1);
                Counted(self.0.$m(rhs.0))
            }
        }
    };
}
counted_binop!(Add add);
counted_binop!(Sub sub);
counted_binop!(Mul mul);
counted_binop!(Div div);

impl<T: Scalar> Neg for Counted<T> {
    type Output = Counted<T>;
    fn neg(self) -> Counted<T> {
        bump(|t| t.arithmetic += 1);
        Counted(-self.0)
    }
}

impl<T: Scalar> Zero for Counted<T> {
    fn zero() -> Self {
        Counted(T::zero())
    }
    fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

impl<T: Scalar> One for Counted<T> {
    fn one() -> Self {
        Counted(T::one())
    }
}

impl<T: Scalar> Scalar for Counted<T> {
    const EXACT: bool = T::EXACT;
    fn from_f64(x: f64) -> Self {
        Counted(T::from_f64(x))
    }
    fn to_f64(&self) -> f64 {
        self.0.to_f64()
    }
    fn exp(&self) -> Self {
        bump(|t| t.exponentials += 1);
        Counted(self.0.exp())
    }
    fn is_finite(&self) -> bool {
        self.0.is_finite()
    }
    fn from_exact(x: &ExpSum) -> Self {
        Counted(T::from_exact(x))
    }
    fn relu(&self) -> Self {
        bump(|t| t.jumps += 1);
        Counted(self.0.relu())
    }
    fn abs(&self) -> Self {
        bump(|t| t.jumps += 1);
        Counted(self.0.abs())
    }
    fn from_usize(n: usize) -> Self {
        Counted(T::from_usize(n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::BigRational;

    #[test]
    fn counted_tallies_by_kind() {
        take_tally();
        let a = Counted::new(2.0f64);
        let b = Counted::new(-3.0f64);
        let c = (a.clone() * b.clone() + a).relu().exp();
        assert_eq!(c.0, 1.0);
        let t = take_tally();
        assert_eq!(t, Tally { exponentials: 1, arithmetic: 2, jumps: 1 });
        assert_eq!(take_tally(), Tally::default());
    }

    #[test]
    fn exact_relu_sees_tiny_values() {
        let tiny = ExpSum::term(BigRational::from_integer(1.into()), BigRational::from_integer(1_000_000.into()));
        assert_eq!(Scalar::relu(&tiny), tiny);
        assert_eq!(Scalar::relu(&-tiny), ExpSum::zero());
    }
}
