//! Named traversal over learnable tensors.
//!
//! Every parameter container implements [`ParamSet`], which yields its
//! matrices in a fixed order with dotted names (`decoder.0.wq`). Optimizers,
//! checkpoint I/O, averaging and gradient checks are all written against this
//! one traversal so they never disagree about layout.

use crate::numerics::{Matrix, Scalar};

pub trait ParamSet<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>));

    fn named_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, m| out.push((name, m)));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut ptrs: Vec<*mut Matrix<T>> = Vec::new();
        self.visit_mut("", &mut |_, m| ptrs.push(m as *mut _));
        // SAFETY: each pointer comes from a distinct field reached through a
        // single exclusive borrow of `self`, so no two of them alias.
        ptrs.into_iter().map(|p| unsafe { &mut *p }).collect()
    }

    fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.len());
        n
    }

    /// Same layout with every entry set to zero.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, m| m.fill(T::zero()));
        z
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar> ParamSet<T> for Matrix<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        f(prefix.to_string(), self);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        f(prefix.to_string(), self);
    }
}

impl<T: Scalar, P: ParamSet<T>> ParamSet<T> for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Scalar, P: ParamSet<T>> ParamSet<T> for Option<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}

/// Implements [`ParamSet`] for a struct generic over `T` by listing its fields.
macro_rules! impl_param_set {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::numerics::Scalar> $crate::params::ParamSet<T> for $ty<T> {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a $crate::numerics::Matrix<T>),
            ) {
                $( self.$field.visit(&$crate::params::join(prefix, stringify!($field)), f); )*
            }

            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(String, &mut $crate::numerics::Matrix<T>),
            ) {
                $( self.$field.visit_mut(&$crate::params::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}

pub(crate) use impl_param_set;
