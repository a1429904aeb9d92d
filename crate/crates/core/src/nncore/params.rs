use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Architectural component a parameter belongs to. Weight transfer between
/// the pretraining and translation stages is decided per component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    FrameAdapter,
    TemporalConv,
    ContextTransformer,
    Mapper,
    LanguageEmbedding,
    LanguageEncoder,
    TranslationEncoder,
    TranslationDecoder,
    Temperature,
}

impl Component {
    pub const ALL: [Component; 9] = [
        Component::FrameAdapter,
        Component::TemporalConv,
        Component::ContextTransformer,
        Component::Mapper,
        Component::LanguageEmbedding,
        Component::LanguageEncoder,
        Component::TranslationEncoder,
        Component::TranslationDecoder,
        Component::Temperature,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::FrameAdapter => "frame_adapter",
            Component::TemporalConv => "temporal_conv",
            Component::ContextTransformer => "context_transformer",
            Component::Mapper => "mapper",
            Component::LanguageEmbedding => "language_embedding",
            Component::LanguageEncoder => "language_encoder",
            Component::TranslationEncoder => "translation_encoder",
            Component::TranslationDecoder => "translation_decoder",
            Component::Temperature => "temperature",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub component: Component,
    pub value: Tensor<T>,
    /// Buffers such as batch-norm running statistics are stored alongside
    /// weights but never touched by the optimizer.
    pub trainable: bool,
}

/// Named, component-tagged parameters in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        component: Component,
        value: Tensor<T>,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            component,
            value,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn components(&self) -> Vec<Component> {
        let mut out: Vec<Component> = self.params.iter().map(|p| p.component).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn num_trainable_values(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Same parameters at another precision, ids preserved.
    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    component: p.component,
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Per-parameter gradient slots, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn new(n: usize) -> Self {
        Self {
            slots: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: Tensor<T>) {
        match &mut self.slots[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds another gradient set slot by slot, in parameter order.
    pub fn merge(&mut self, other: Gradients<T>) {
        for (i, g) in other.slots.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn global_norm(&self) -> T {
        self.slots
            .iter()
            .flatten()
            .map(Tensor::sum_sq)
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for g in self.slots.iter_mut().flatten() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
}
