//! Uniform traversal of parameter structs.
//!
//! Every trainable component implements [`ParamSet`] so the trainer,
//! checkpointing, and the tape can walk parameters by stable dotted paths
//! ("backbone.blocks.0.attn.wq") in a deterministic order.

use crate::tensor::{Element, Tape, Tensor};

pub trait ParamSet<E: Element>: Sized {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<E>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>));
    fn map(&self, f: &mut dyn FnMut(&Tensor<E>) -> Tensor<E>) -> Self;
}

/// All `(path, tensor)` pairs in visit order.
pub fn collect<'a, E: Element, P: ParamSet<E>>(p: &'a P) -> Vec<(String, &'a Tensor<E>)> {
    let mut out = Vec::new();
    p.visit("", &mut |path, t| out.push((path, t)));
    out
}

pub fn param_count<E: Element, P: ParamSet<E>>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, t| n += t.numel());
    n
}

/// Clone of the whole set with every tensor registered on `tape`.
pub fn tracked<E: Element, P: ParamSet<E>>(p: &P, tape: &Tape<E>) -> P {
    p.map(&mut |t| tape.watch(t))
}

/// Implements [`ParamSet`] for a struct. Each field is listed with a kind:
/// `tensor`, `opt_tensor`, `group`, `opt_group`, `vec_group`, `vec_tensor`,
/// or `copy` (non-parameter payload, cloned through `map`).
macro_rules! param_set {
    ($ty:ident { $($kind:ident $field:ident),* $(,)? }) => {
        impl<E: $crate::tensor::Element> $crate::params::ParamSet<E> for $ty<E> {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a $crate::tensor::Tensor<E>),
            ) {
                $( param_set!(@visit $kind, self, prefix, f, $field); )*
            }

            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(String, &mut $crate::tensor::Tensor<E>),
            ) {
                $( param_set!(@visit_mut $kind, self, prefix, f, $field); )*
            }

            fn map(
                &self,
                f: &mut dyn FnMut(&$crate::tensor::Tensor<E>) -> $crate::tensor::Tensor<E>,
            ) -> Self {
                Self { $( $field: param_set!(@map $kind, self, f, $field) ),* }
            }
        }
    };

    (@visit tensor, $s:ident, $p:ident, $f:ident, $field:ident) => {
        $f(format!("{}{}", $p, stringify!($field)), &$s.$field);
    };
    (@visit opt_tensor, $s:ident, $p:ident, $f:ident, $field:ident) => {
        if let Some(t) = &$s.$field {
            $f(format!("{}{}", $p, stringify!($field)), t);
        }
    };
    (@visit group, $s:ident, $p:ident, $f:ident, $field:ident) => {
        $s.$field.visit(&format!("{}{}.", $p, stringify!($field)), $f);
    };
    (@visit opt_group, $s:ident, $p:ident, $f:ident, $field:ident) => {
        if let Some(g) = &$s.$field {
            g.visit(&format!("{}{}.", $p, stringify!($field)), $f);
        }
    };
    (@visit vec_group, $s:ident, $p:ident, $f:ident, $field:ident) => {
        for (i, g) in $s.$field.iter().enumerate() {
            g.visit(&format!("{}{}.{}.", $p, stringify!($field), i), $f);
        }
    };
    (@visit vec_tensor, $s:ident, $p:ident, $f:ident, $field:ident) => {
        for (i, t) in $s.$field.iter().enumerate() {
            $f(format!("{}{}.{}", $p, stringify!($field), i), t);
        }
    };
    (@visit copy, $s:ident, $p:ident, $f:ident, $field:ident) => {};

    (@visit_mut tensor, $s:ident, $p:ident, $f:ident, $field:ident) => {
        $f(format!("{}{}", $p, stringify!($field)), &mut $s.$field);
    };
    (@visit_mut opt_tensor, $s:ident, $p:ident, $f:ident, $field:ident) => {
        if let Some(t) = &mut $s.$field {
            $f(format!("{}{}", $p, stringify!($field)), t);
        }
    };
    (@visit_mut group, $s:ident, $p:ident, $f:ident, $field:ident) => {
        $s.$field.visit_mut(&format!("{}{}.", $p, stringify!($field)), $f);
    };
    (@visit_mut opt_group, $s:ident, $p:ident, $f:ident, $field:ident) => {
        if let Some(g) = &mut $s.$field {
            g.visit_mut(&format!("{}{}.", $p, stringify!($field)), $f);
        }
    };
    (@visit_mut vec_group, $s:ident, $p:ident, $f:ident, $field:ident) => {
        for (i, g) in $s.$field.iter_mut().enumerate() {
            g.visit_mut(&format!("{}{}.{}.", $p, stringify!($field), i), $f);
        }
    };
    (@visit_mut vec_tensor, $s:ident, $p:ident, $f:ident, $field:ident) => {
        for (i, t) in $s.$field.iter_mut().enumerate() {
            $f(format!("{}{}.{}", $p, stringify!($field), i), t);
        }
    };
    (@visit_mut copy, $s:ident, $p:ident, $f:ident, $field:ident) => {};

    (@map tensor, $s:ident, $f:ident, $field:ident) => {
        $f(&$s.$field)
    };
    (@map opt_tensor, $s:ident, $f:ident, $field:ident) => {
        $s.$field.as_ref().map(|t| $f(t))
    };
    (@map group, $s:ident, $f:ident, $field:ident) => {
        $s.$field.map($f)
    };
    (@map opt_group, $s:ident, $f:ident, $field:ident) => {
        $s.$field.as_ref().map(|g| g.map($f))
    };
    (@map vec_group, $s:ident, $f:ident, $field:ident) => {
        $s.$field.iter().map(|g| g.map($f)).collect()
    };
    (@map vec_tensor, $s:ident, $f:ident, $field:ident) => {
        $s.$field.iter().map(|t| $f(t)).collect()
    };
    (@map copy, $s:ident, $f:ident, $field:ident) => {
        $s.$field.clone()
    };
}

pub(crate) use param_set;
