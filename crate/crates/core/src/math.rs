//! Float functions that come from `std` when available and from `libm`
//! otherwise, so the rest of the crate can stay `no_std`-clean.

#![allow(dead_code)]

macro_rules! shim {
    ($(($name:ident, $libm:ident)),* $(,)?) => {
        $(
            #[cfg(feature = "std")]
            #[inline]
            pub(crate) fn $name(x: f64) -> f64 {
                f64::$name(x)
            }
            #[cfg(not(feature = "std"))]
            #[inline]
            pub(crate) fn $name(x: f64) -> f64 {
                libm::$libm(x)
            }
        )*
    };
}

shim!(
    (sqrt, sqrt),
    (abs, fabs),
    (sin, sin),
    (cos, cos),
    (exp, exp),
    (ln, log),
    (ceil, ceil),
);

/// `x^y` for the few places an integer power is not enough.
#[cfg(feature = "std")]
#[inline]
pub(crate) fn powf(x: f64, y: f64) -> f64 {
    f64::powf(x, y)
}
#[cfg(not(feature = "std"))]
#[inline]
pub(crate) fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}
