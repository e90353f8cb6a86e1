//! Flat named tensors and the element-wise arithmetic the aggregators are
//! assembled from.
//!
//! A [`ParameterSet`] is an ordered list of named layers. Layers are sorted
//! lexicographically by name when the set is built and the order is frozen
//! from then on, so every reduction over a federation visits elements in the
//! same order on every client.

use serde::{Deserialize, Serialize};

use crate::error::{FlError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Layer {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        Layer {
            name: name.into(),
            shape,
            values,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Layer::new(name, shape, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Layer>", into = "Vec<Layer>")]
pub struct ParameterSet {
    layers: Vec<Layer>,
}

impl TryFrom<Vec<Layer>> for ParameterSet {
    type Error = FlError;

    fn try_from(layers: Vec<Layer>) -> Result<Self> {
        ParameterSet::new(layers)
    }
}

impl From<ParameterSet> for Vec<Layer> {
    fn from(set: ParameterSet) -> Self {
        set.layers
    }
}

impl ParameterSet {
    /// Builds a set, sorting layers by name and validating shapes and values.
    pub fn new(mut layers: Vec<Layer>) -> Result<Self> {
        layers.sort_by(|a, b| a.name.cmp(&b.name));
        for pair in layers.windows(2) {
            if pair[0].name == pair[1].name {
                return Err(FlError::structure(&pair[0].name, "duplicate layer name"));
            }
        }
        for layer in &layers {
            if layer.shape.is_empty() || layer.shape.contains(&0) {
                return Err(FlError::structure(
                    &layer.name,
                    format!("shape {:?} must be non-empty with positive dims", layer.shape),
                ));
            }
            let expected: usize = layer.shape.iter().product();
            if expected != layer.values.len() {
                return Err(FlError::structure(
                    &layer.name,
                    format!(
                        "shape {:?} needs {} values, got {}",
                        layer.shape,
                        expected,
                        layer.values.len()
                    ),
                ));
            }
            if let Some(pos) = layer.values.iter().position(|v| !v.is_finite()) {
                return Err(FlError::structure(
                    &layer.name,
                    format!("non-finite value at element {pos}"),
                ));
            }
        }
        Ok(ParameterSet { layers })
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| 0.0)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers
            .binary_search_by(|l| l.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.layers[i])
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers
            .binary_search_by(|l| l.name.as_str().cmp(name))
            .ok()
            .map(move |i| &mut self.layers[i])
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Total number of scalar elements across all layers.
    pub fn num_elements(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.values.iter().copied())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// Errors on the first layer where names, order or shapes diverge.
    pub fn check_same_structure(&self, other: &ParameterSet) -> Result<()> {
        for (i, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a.name != b.name {
                return Err(FlError::structure(
                    &a.name,
                    format!("layer {i} is named `{}` on the other side", b.name),
                ));
            }
            if a.shape != b.shape {
                return Err(FlError::structure(
                    &a.name,
                    format!("shape {:?} vs {:?}", a.shape, b.shape),
                ));
            }
        }
        if self.layers.len() != other.layers.len() {
            let (longer, n) = if self.layers.len() > other.layers.len() {
                (self, other.layers.len())
            } else {
                (other, self.layers.len())
            };
            return Err(FlError::structure(
                &longer.layers[n].name,
                format!("layer count {} vs {}", self.layers.len(), other.layers.len()),
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParameterSet {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                name: l.name.clone(),
                shape: l.shape.clone(),
                values: l.values.iter().map(|&x| f(x)).collect(),
            })
            .collect();
        ParameterSet { layers }
    }

    /// Applies `f` pairwise to corresponding elements of two identically
    /// structured sets.
    pub fn zip_map(&self, other: &ParameterSet, f: impl Fn(f64, f64) -> f64) -> Result<ParameterSet> {
        self.check_same_structure(other)?;
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| Layer {
                name: a.name.clone(),
                shape: a.shape.clone(),
                values: a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect(),
            })
            .collect();
        Ok(ParameterSet { layers })
    }

    pub fn add(&self, other: &ParameterSet) -> Result<ParameterSet> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParameterSet) -> Result<ParameterSet> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> ParameterSet {
        self.map(|x| k * x)
    }

    /// In-place `self += k * other`.
    pub fn add_scaled(&mut self, k: f64, other: &ParameterSet) -> Result<()> {
        self.check_same_structure(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.values.iter_mut().zip(&b.values) {
                *x += k * y;
            }
        }
        Ok(())
    }

    pub fn inner_product(&self, other: &ParameterSet) -> Result<f64> {
        flat_inner_product(self, other)
    }

    pub fn l2_norm(&self) -> f64 {
        self.values().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &ParameterSet) -> Result<f64> {
        self.check_same_structure(other)?;
        Ok(self
            .values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Sum over every element of `a[i] * b[i]`, in layer order.
pub fn flat_inner_product(a: &ParameterSet, b: &ParameterSet) -> Result<f64> {
    a.check_same_structure(b)?;
    Ok(a.values().zip(b.values()).map(|(x, y)| x * y).sum())
}

fn check_stack(stack: &[ParameterSet]) -> Result<&ParameterSet> {
    let first = stack.first().ok_or(FlError::EmptyFederation)?;
    for other in &stack[1..] {
        first.check_same_structure(other)?;
    }
    Ok(first)
}

/// Softmax across clients, computed independently at every element index.
///
/// Output `c` holds client `c`'s share at each element; shares at one index
/// sum to one. The per-element maximum is subtracted before exponentiation.
pub fn cross_client_softmax(stack: &[ParameterSet]) -> Result<Vec<ParameterSet>> {
    let first = check_stack(stack)?;
    let mut out: Vec<ParameterSet> = stack.iter().map(ParameterSet::zeros_like).collect();
    let mut exps = vec![0.0; stack.len()];
    for (li, layer) in first.layers.iter().enumerate() {
        for e in 0..layer.len() {
            let max = stack
                .iter()
                .map(|s| s.layers[li].values[e])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (slot, s) in exps.iter_mut().zip(stack) {
                *slot = (s.layers[li].values[e] - max).exp();
                total += *slot;
            }
            for (o, &x) in out.iter_mut().zip(&exps) {
                o.layers[li].values[e] = x / total;
            }
        }
    }
    Ok(out)
}

/// Element-wise `sum_c weights[c] ⊙ stack[c]`.
pub fn elementwise_weighted_sum(weights: &[ParameterSet], stack: &[ParameterSet]) -> Result<ParameterSet> {
    if weights.len() != stack.len() {
        return Err(FlError::InvalidArgument(format!(
            "{} weight sets for {} parameter sets",
            weights.len(),
            stack.len()
        )));
    }
    let first = check_stack(stack)?;
    let mut acc = first.zeros_like();
    for (w, s) in weights.iter().zip(stack) {
        acc.check_same_structure(w)?;
        for ((a, wl), sl) in acc.layers.iter_mut().zip(&w.layers).zip(&s.layers) {
            for ((x, &p), &g) in a.values.iter_mut().zip(&wl.values).zip(&sl.values) {
                *x += p * g;
            }
        }
    }
    Ok(acc)
}

/// `sum_c weights[c] * stack[c]` with one scalar per set.
pub fn weighted_sum(weights: &[f64], stack: &[ParameterSet]) -> Result<ParameterSet> {
    if weights.len() != stack.len() {
        return Err(FlError::InvalidArgument(format!(
            "{} weights for {} parameter sets",
            weights.len(),
            stack.len()
        )));
    }
    let first = check_stack(stack)?;
    let mut acc = first.zeros_like();
    for (&w, s) in weights.iter().zip(stack) {
        acc.add_scaled(w, s)?;
    }
    Ok(acc)
}

/// Uniform element-wise mean.
pub fn mean(stack: &[ParameterSet]) -> Result<ParameterSet> {
    let n = stack.len();
    let w = vec![1.0 / n as f64; n];
    if n == 1 {
        return Ok(stack[0].clone());
    }
    weighted_sum(&w, stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(values: Vec<f64>) -> ParameterSet {
        let n = values.len();
        ParameterSet::new(vec![Layer::new("w", vec![n], values)]).unwrap()
    }

    fn two_layer(a: Vec<f64>, b: Vec<f64>) -> ParameterSet {
        let (na, nb) = (a.len(), b.len());
        ParameterSet::new(vec![Layer::new("b", vec![nb], b), Layer::new("a", vec![na], a)]).unwrap()
    }

    #[test]
    fn layers_sorted_and_validated() {
        let set = two_layer(vec![1.0], vec![2.0, 3.0]);
        let names: Vec<_> = set.layers().iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
        assert!(ParameterSet::new(vec![Layer::new("x", vec![2], vec![1.0])]).is_err());
        assert!(ParameterSet::new(vec![Layer::new("x", vec![1], vec![f64::NAN])]).is_err());
        assert!(ParameterSet::new(vec![Layer::zeros("x", vec![1]), Layer::zeros("x", vec![1])]).is_err());
    }

    #[test]
    fn zip_map_examples() {
        let r = one(vec![1.0, 2.0]).zip_map(&one(vec![3.0, 4.0]), |a, b| a + b).unwrap();
        assert_eq!(r.to_flat(), [4.0, 6.0]);
        let r = one(vec![7.0, -2.5, 3.0])
            .zip_map(&one(vec![0.0; 3]), |a, b| a * b)
            .unwrap();
        assert!(r.values().all(|x| x == 0.0));
        let r = one(vec![1.0, 5.0]).zip_map(&one(vec![2.0, 3.0]), f64::max).unwrap();
        assert_eq!(r.to_flat(), [2.0, 5.0]);
    }

    #[test]
    fn zip_map_names_divergent_layer() {
        let a = two_layer(vec![1.0], vec![1.0]);
        let b = ParameterSet::new(vec![
            Layer::new("a", vec![1], vec![1.0]),
            Layer::new("c", vec![1], vec![1.0]),
        ])
        .unwrap();
        match a.zip_map(&b, |x, _| x) {
            Err(FlError::Structure { layer, .. }) => assert_eq!(layer, "b"),
            other => panic!("unexpected {other:?}"),
        }
        let c = two_layer(vec![1.0, 2.0], vec![1.0]);
        match a.zip_map(&c, |x, _| x) {
            Err(FlError::Structure { layer, .. }) => assert_eq!(layer, "a"),
            other => panic!("unexpected {other:?}"),
        }
        let short = one(vec![1.0]);
        assert!(matches!(short.zip_map(&a, |x, _| x), Err(FlError::Structure { .. })));
    }

    #[test]
    fn softmax_examples() {
        let p = cross_client_softmax(&[one(vec![3.0, -1e300, 0.0])]).unwrap();
        assert!(p[0].values().all(|x| x == 1.0));

        let p = cross_client_softmax(&[one(vec![0.0]), one(vec![3f64.ln()])]).unwrap();
        assert!((p[0].to_flat()[0] - 0.25).abs() < 1e-15);
        assert!((p[1].to_flat()[0] - 0.75).abs() < 1e-15);

        let p = cross_client_softmax(&[one(vec![7.0]), one(vec![7.0]), one(vec![7.0])]).unwrap();
        for s in &p {
            assert!((s.to_flat()[0] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_values_stay_finite() {
        let p = cross_client_softmax(&[one(vec![1000.0]), one(vec![999.0])]).unwrap();
        assert!(p.iter().all(ParameterSet::is_finite));
        let e = (-1f64).exp();
        assert!((p[0].to_flat()[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(cross_client_softmax(&[]), Err(FlError::EmptyFederation)));
        assert!(matches!(
            cross_client_softmax(&[one(vec![1.0]), one(vec![1.0, 2.0])]),
            Err(FlError::Structure { .. })
        ));
    }

    #[test]
    fn inner_product_examples() {
        assert_eq!(
            flat_inner_product(&one(vec![1.0, 0.0]), &one(vec![0.0, 1.0])).unwrap(),
            0.0
        );
        let a = one(vec![3.0, 4.0]);
        assert_eq!(flat_inner_product(&a, &a).unwrap(), 25.0);
        assert_eq!(a.l2_norm(), 5.0);
    }

    #[test]
    fn inner_product_matches_manual_flatten() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (a1, a2, b1, b2) = (draw(17), draw(5), draw(17), draw(5));
        let a = two_layer(a1.clone(), a2.clone());
        let b = two_layer(b1.clone(), b2.clone());
        // brute force over the concatenation in sorted-layer order ("a" then "b")
        let fa: Vec<f64> = a1.iter().chain(&a2).copied().collect();
        let fb: Vec<f64> = b1.iter().chain(&b2).copied().collect();
        let mut manual = 0.0;
        for i in 0..fa.len() {
            manual += fa[i] * fb[i];
        }
        assert!((flat_inner_product(&a, &b).unwrap() - manual).abs() < 1e-12);
    }

    #[test]
    fn weighted_sums() {
        let s = [one(vec![2.0, 0.0]), one(vec![0.0, 2.0])];
        assert_eq!(mean(&s).unwrap().to_flat(), [1.0, 1.0]);
        let w = [one(vec![1.0, 0.25]), one(vec![0.0, 0.75])];
        assert_eq!(elementwise_weighted_sum(&w, &s).unwrap().to_flat(), [2.0, 1.5]);
        assert!(weighted_sum(&[1.0], &s).is_err());
    }

    fn stack_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..=5, 1usize..200)
            .prop_flat_map(|(c, n)| prop::collection::vec(prop::collection::vec(-50.0f64..50.0, n), c))
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in stack_strategy()) {
            let stack: Vec<_> = rows.into_iter().map(one).collect();
            let p = cross_client_softmax(&stack).unwrap();
            let n = stack[0].num_elements();
            for e in 0..n {
                let total: f64 = p.iter().map(|s| s.to_flat()[e]).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                for s in &p {
                    let x = s.to_flat()[e];
                    prop_assert!(x > 0.0 && x <= 1.0);
                }
            }
        }

        #[test]
        fn softmax_shift_invariant(rows in stack_strategy(), shift in -100.0f64..100.0) {
            let stack: Vec<_> = rows.into_iter().map(one).collect();
            let shifted: Vec<_> = stack.iter().map(|s| s.map(|x| x + shift)).collect();
            let p = cross_client_softmax(&stack).unwrap();
            let q = cross_client_softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!(a.max_abs_diff(b).unwrap() < 1e-9);
            }
        }

        #[test]
        fn add_and_mul_commute(a in prop::collection::vec(-1e6f64..1e6, 1..64), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.random_range(-1e6..1e6)).collect();
            let (x, y) = (one(a), one(b));
            prop_assert_eq!(x.zip_map(&y, |p, q| p + q).unwrap(), y.zip_map(&x, |p, q| p + q).unwrap());
            prop_assert_eq!(x.zip_map(&y, |p, q| p * q).unwrap(), y.zip_map(&x, |p, q| p * q).unwrap());
        }
    }
}
