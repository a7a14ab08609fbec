//! Named traversal over the tensors a model owns.

use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything that owns tensors: trainable parameters (`requires_grad`) and
/// buffers such as running statistics. Traversal order is fixed and defines
/// the serialization order.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    /// Number of learnable scalars.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| {
            if t.requires_grad() {
                n += t.numel();
            }
        });
        n
    }

    fn named_shapes(&self) -> Vec<(String, Vec<usize>, bool)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_string(), t.shape().to_vec(), t.requires_grad())));
        out
    }

    /// Copies gradients from a tape that ran `backward` into each trainable
    /// tensor's grad slot. Tensors the tape never saw get a zero gradient.
    fn pull_grads(&mut self, tape: &Tape) {
        self.visit_mut("", &mut |_, t| {
            if t.requires_grad() {
                let g = tape.grad_of(t).unwrap_or_else(|| vec![0.0; t.numel()]);
                t.set_grad(g).expect("gradient length matches tensor");
            }
        });
    }

    /// Commits running-statistics updates recorded during a training forward.
    fn apply_bn_updates(&mut self, tape: &Tape) {
        let updates = tape.bn_updates();
        if updates.is_empty() {
            return;
        }
        self.visit_mut("", &mut |_, t| {
            for u in updates {
                if u.running_mean == t.id() {
                    t.data_mut().copy_from_slice(&u.new_mean);
                } else if u.running_var == t.id() {
                    t.data_mut().copy_from_slice(&u.new_var);
                }
            }
        });
    }
}

impl Parameterized for Tensor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(prefix, self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(prefix, self)
    }
}

impl<T: Parameterized> Parameterized for Option<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(t) = self {
            t.visit(prefix, f)
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(t) = self {
            t.visit_mut(prefix, f)
        }
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, t) in self.iter().enumerate() {
            t.visit(&join(prefix, &i.to_string()), f)
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, t) in self.iter_mut().enumerate() {
            t.visit_mut(&join(prefix, &i.to_string()), f)
        }
    }
}

impl<A: Parameterized, B: Parameterized> Parameterized for (A, B) {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.0.visit(&join(prefix, "0"), f);
        self.1.visit(&join(prefix, "1"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.0.visit_mut(&join(prefix, "0"), f);
        self.1.visit_mut(&join(prefix, "1"), f);
    }
}

/// Implements [`Parameterized`] by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_parameterized {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::numerics::params::Parameterized for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &$crate::numerics::Tensor)) {
                $( self.$field.visit(&$crate::numerics::params::join(prefix, stringify!($field)), f); )*
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut $crate::numerics::Tensor)) {
                $( self.$field.visit_mut(&$crate::numerics::params::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
