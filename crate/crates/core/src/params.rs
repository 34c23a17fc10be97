//! Named, shaped parameter storage with frozen/trainable flags, plus the
//! gradient accumulator the optimizer consumes.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stable handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub frozen: bool,
}

/// The complete parameter set of a model, in registration order.
///
/// Registration order is part of the determinism contract: the optimizer,
/// checkpoint writer and gradient accumulator all walk parameters in this
/// order.
#[derive(Debug, Clone)]
pub struct ParamSet<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, frozen: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.by_name(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            value,
            frozen,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<F>) {
        assert_eq!(
            self.params[id.0].value.shape(),
            value.shape(),
            "set_value must preserve shape of {}",
            self.params[id.0].name
        );
        self.params[id.0].value = value;
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Trainable scalar count, for reporting.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Apply `f` to every trainable parameter value in registration order.
    pub fn update_trainable(&mut self, mut f: impl FnMut(ParamId, &str, &mut Tensor<F>)) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if !p.frozen {
                f(ParamId(i), &p.name, &mut p.value);
            }
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    frozen: p.frozen,
                })
                .collect(),
        }
    }
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamSet`].
///
/// Entries stay `None` until a backward pass touches them; a parameter off
/// the ancestry path therefore reads back as an all-zero gradient.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    by_param: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn new(n_params: usize) -> Self {
        Gradients {
            by_param: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.by_param[id.0].as_ref()
    }

    /// Gradient value at a flat component index, zero when untouched.
    pub fn component(&self, id: ParamId, idx: usize) -> F {
        match &self.by_param[id.0] {
            Some(t) => t.data()[idx],
            None => F::zero(),
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<F>) {
        match &mut self.by_param[id.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            None => self.by_param[id.0] = Some(g.clone()),
        }
    }

    /// Scatter-add row gradients into an embedding-table gradient.
    pub fn scatter_rows(&mut self, id: ParamId, table_shape: &[usize], rows: &[usize], g: &Tensor<F>) {
        let acc = self.by_param[id.0]
            .get_or_insert_with(|| Tensor::zeros(table_shape.to_vec()));
        let cols = table_shape[1];
        for (i, &r) in rows.iter().enumerate() {
            for c in 0..cols {
                let v = acc.data()[r * cols + c] + g.data()[i * cols + c];
                acc.data_mut()[r * cols + c] = v;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<F>) {
        assert_eq!(self.by_param.len(), other.by_param.len());
        for (i, g) in other.by_param.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, k: F) {
        for g in self.by_param.iter_mut().flatten() {
            for x in g.data_mut() {
                *x = *x * k;
            }
        }
    }

    /// L2 norm over all accumulated gradients.
    pub fn global_norm(&self) -> F {
        let mut acc = F::zero();
        for g in self.by_param.iter().flatten() {
            for &x in g.data() {
                acc = acc + x * x;
            }
        }
        acc.sqrt()
    }

    /// Scale gradients down so the global norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: F) {
        let norm = self.global_norm();
        if norm > max_norm && norm > F::zero() {
            self.scale(max_norm / norm);
        }
    }
}
