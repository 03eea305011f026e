//! Named-parameter traversal.
//!
//! Every trainable component exposes its tensors through [`ParamSet`] so the
//! optimizer, the weight averager, and the checkpoint reader/writer all see
//! the same flat list of `(hierarchical name, tensor)` pairs in the same
//! order. Names join with `.` (for example `block3.mixer.w_in`).
//!
//! Parameters must not share storage: the tape dedupes bound tensors by
//! their backing allocation, so two logically distinct parameters aliasing
//! one buffer would silently merge on the tape. Helpers that copy weights
//! between models therefore deep-copy the data.

use crate::tensor::{Element, Tensor};

pub trait ParamSet<E: Element> {
    /// Appends `(name, tensor)` pairs for every parameter under `prefix`.
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<E>)>);

    /// Mutable counterpart of [`ParamSet::visit`]; must produce the same
    /// names in the same order.
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<E>)>);

    fn params(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    /// Total number of scalar parameters.
    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Joins a prefix and a leaf name with `.`, eliding an empty prefix.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Copies parameters from `src` into `dst` wherever names match, deep-copying
/// the data so the two models never share storage. Returns the matched names.
pub fn copy_matching<E: Element, S: ParamSet<E>, D: ParamSet<E>>(
    src: &S,
    dst: &mut D,
) -> Vec<String> {
    let src_params: Vec<(String, Vec<E>)> = src
        .params()
        .into_iter()
        .map(|(name, t)| (name, t.data().to_vec()))
        .collect();
    let mut matched = Vec::new();
    for (name, t) in dst.params_mut() {
        if let Some((_, data)) = src_params.iter().find(|(n, _)| *n == name) {
            assert_eq!(
                t.numel(),
                data.len(),
                "shape mismatch copying parameter {name}"
            );
            t.data_mut().copy_from_slice(data);
            matched.push(name);
        }
    }
    matched
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Pair<E: Element> {
        w: Tensor<E>,
        b: Tensor<E>,
    }

    impl<E: Element> ParamSet<E> for Pair<E> {
        fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<E>)>) {
            out.push((join(prefix, "w"), &self.w));
            out.push((join(prefix, "b"), &self.b));
        }
        fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<E>)>) {
            out.push((join(prefix, "w"), &mut self.w));
            out.push((join(prefix, "b"), &mut self.b));
        }
    }

    #[test]
    fn names_and_counts() {
        let p: Pair<f64> = Pair {
            w: Tensor::zeros(&[2, 3]),
            b: Tensor::zeros(&[3]),
        };
        let names: Vec<String> = p.params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["w", "b"]);
        assert_eq!(p.param_count(), 9);
        assert_eq!(join("block0.mixer", "w"), "block0.mixer.w");
    }

    #[test]
    fn copy_matching_deep_copies() {
        let src: Pair<f64> = Pair {
            w: Tensor::full(&[2, 2], 5.0),
            b: Tensor::full(&[2], -1.0),
        };
        let mut dst: Pair<f64> = Pair {
            w: Tensor::zeros(&[2, 2]),
            b: Tensor::zeros(&[2]),
        };
        let matched = copy_matching(&src, &mut dst);
        assert_eq!(matched, vec!["w", "b"]);
        assert_eq!(dst.w.data()[3].to_f64(), 5.0);
        // Deep copy: mutating the destination leaves the source untouched.
        dst.w.data_mut()[0] = 9.0;
        assert_eq!(src.w.data()[0].to_f64(), 5.0);
    }
}
