//! Named parameter traversal shared by the optimiser, checkpoints and gradient checks.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};

/// A collection of named, dense `f64` tensors.
///
/// Both traversals must yield tensors in the same order; gradients are stored
/// in a value of the same type as the parameters so the two zip together.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn fill_zero(&mut self) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    /// `self += scale * other`.
    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        let src = other.tensors();
        for ((_, mut dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.scaled_add(scale, &s);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Flat element access by global index, in traversal order.
    fn get_flat(&self, mut index: usize) -> Option<f64> {
        for (_, t) in self.tensors() {
            if index < t.len() {
                return t.iter().nth(index).copied();
            }
            index -= t.len();
        }
        None
    }

    fn set_flat(&mut self, mut index: usize, value: f64) -> bool {
        for (_, mut t) in self.tensors_mut() {
            if index < t.len() {
                if let Some(x) = t.iter_mut().nth(index) {
                    *x = value;
                }
                return true;
            }
            index -= t.len();
        }
        false
    }

    /// Copy of every tensor's contents, used for freeze-contract audits.
    fn snapshot(&self) -> Vec<(String, Vec<f64>)> {
        self.tensors()
            .into_iter()
            .map(|(n, t)| (n, t.iter().copied().collect()))
            .collect()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if name.is_empty() {
        prefix.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl ParamSet for Array1<f64> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![(String::new(), self.view().into_dyn())]
    }
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![(String::new(), self.view_mut().into_dyn())]
    }
}

impl ParamSet for Array2<f64> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![(String::new(), self.view().into_dyn())]
    }
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![(String::new(), self.view_mut().into_dyn())]
    }
}

impl<T: ParamSet> ParamSet for Vec<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, item) in self.iter().enumerate() {
            for (n, t) in item.tensors() {
                out.push((join(&i.to_string(), &n), t));
            }
        }
        out
    }
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, item) in self.iter_mut().enumerate() {
            for (n, t) in item.tensors_mut() {
                out.push((join(&i.to_string(), &n), t));
            }
        }
        out
    }
}

/// Implements [`ParamSet`] for a struct by listing its parameter fields.
macro_rules! impl_param_set {
    ($ty:ty { $($field:ident),+ $(,)? }) => {
        impl $crate::params::ParamSet for $ty {
            fn tensors(&self) -> Vec<(String, ndarray::ArrayViewD<'_, f64>)> {
                let mut out = Vec::new();
                $(
                    for (n, t) in $crate::params::ParamSet::tensors(&self.$field) {
                        out.push(($crate::params::join(stringify!($field), &n), t));
                    }
                )+
                out
            }
            fn tensors_mut(&mut self) -> Vec<(String, ndarray::ArrayViewMutD<'_, f64>)> {
                let mut out = Vec::new();
                $(
                    for (n, t) in $crate::params::ParamSet::tensors_mut(&mut self.$field) {
                        out.push(($crate::params::join(stringify!($field), &n), t));
                    }
                )+
                out
            }
        }
    };
}
pub(crate) use impl_param_set;

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    struct Pair {
        a: Array1<f64>,
        b: Vec<Array2<f64>>,
    }
    impl_param_set!(Pair { a, b });

    #[test]
    fn names_and_flat_access() {
        let mut p = Pair {
            a: array![1.0, 2.0],
            b: vec![array![[3.0, 4.0]], array![[5.0]]],
        };
        let names: Vec<_> = p.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["a", "b.0", "b.1"]);
        assert_eq!(p.num_params(), 5);
        assert_eq!(p.get_flat(3), Some(4.0));
        assert!(p.set_flat(4, 9.0));
        assert_eq!(p.b[1][[0, 0]], 9.0);
        assert!(!p.set_flat(5, 0.0));
    }
}
