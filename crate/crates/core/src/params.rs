//! Named parameter traversal shared by every trainable structure.
//!
//! Gradients are stored in a value of the same type as the parameters, so a
//! model and its gradient walk their tensors in identical order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn named_tensors(p: &impl Parameters) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    p.visit("", &mut |n, t| out.push((n.to_string(), t.clone())));
    out
}

pub fn tensors(p: &impl Parameters) -> Vec<Tensor> {
    let mut out = Vec::new();
    p.visit("", &mut |_, t| out.push(t.clone()));
    out
}

pub fn param_count(p: &impl Parameters) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, t| n += t.len());
    n
}

/// Overwrites every parameter, in traversal order, from `values`.
pub fn load_tensors(p: &mut impl Parameters, values: &[Tensor]) -> Result<()> {
    let mut i = 0;
    let mut err = None;
    p.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match values.get(i) {
            Some(v) if v.shape() == t.shape() => t.data_mut().copy_from_slice(v.data()),
            Some(v) => {
                err = Some(Error::shape(
                    "load_tensors",
                    format!("{name}: {:?} vs {:?}", t.shape(), v.shape()),
                ))
            }
            None => err = Some(Error::InvalidArgument(format!("missing tensor for {name}"))),
        }
        i += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if i != values.len() {
        return Err(Error::InvalidArgument(format!(
            "{} tensors supplied for {i} parameters",
            values.len()
        )));
    }
    Ok(())
}

pub fn zeros_like<P: Parameters + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.visit_mut("", &mut |_, t| t.fill(0.0));
    z
}

/// `dst += src`, parameter by parameter.
pub fn accumulate<P: Parameters>(dst: &mut P, src: &P) {
    let src = tensors(src);
    let mut i = 0;
    dst.visit_mut("", &mut |_, t| {
        for (a, b) in t.data_mut().iter_mut().zip(src[i].data()) {
            *a += b;
        }
        i += 1;
    });
}

pub fn scale_all<P: Parameters>(p: &mut P, s: f64) {
    p.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= s));
}

pub fn global_norm(p: &impl Parameters) -> f64 {
    let mut acc = 0.0;
    p.visit("", &mut |_, t| acc += t.data().iter().map(|v| v * v).sum::<f64>());
    acc.sqrt()
}

impl Parameters for Tensor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(prefix, self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(prefix, self)
    }
}

impl<P: Parameters> Parameters for Vec<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<P: Parameters> Parameters for Option<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}

/// Implements [`Parameters`] for a struct by listing its fields.
#[macro_export]
macro_rules! impl_parameters {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::params::Parameters for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &$crate::tensor::Tensor)) {
                $( $crate::params::Parameters::visit(&self.$field, &$crate::params::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut $crate::tensor::Tensor)) {
                $( $crate::params::Parameters::visit_mut(&mut self.$field, &$crate::params::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
