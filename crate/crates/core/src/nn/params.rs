use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvKernel,
    Bias,
    NormScale,
    NormShift,
    AttentionProjection,
    TimeProjection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Start index in the flat parameter vector.
    pub offset: usize,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ParamId {
    pub offset: usize,
    pub len: usize,
}

impl ParamId {
    #[inline]
    pub fn get<'a, F>(&self, flat: &'a [F]) -> &'a [F] {
        &flat[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn get_mut<'a, F>(&self, flat: &'a mut [F]) -> &'a mut [F] {
        &mut flat[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-b, b]` with `b = sqrt(3 / fan_in)`, i.e. unit-variance
    /// activations for unit-variance inputs.
    FanIn(usize),
}

/// Flat storage of every named parameter tensor of a network.
///
/// All tensors live in one contiguous vector so optimizers, checkpoints and
/// gradient checks can treat the network as a single parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    infos: Vec<ParamInfo>,
    values: Vec<F>,
}

impl<F: Real> ParamStore<F> {
    pub(crate) fn new() -> Self {
        Self {
            infos: Vec::new(),
            values: Vec::new(),
        }
    }

    pub(crate) fn add<R: Rng + ?Sized>(
        &mut self,
        name: String,
        shape: &[usize],
        kind: ParamKind,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        debug_assert!(
            self.infos.iter().all(|i| i.name != name),
            "duplicate parameter {name}"
        );
        let offset = self.values.len();
        let len: usize = shape.iter().product();
        match init {
            Init::Zeros => self.values.extend(std::iter::repeat_n(F::zero(), len)),
            Init::Ones => self.values.extend(std::iter::repeat_n(F::one(), len)),
            Init::FanIn(fan_in) => {
                let bound = (3.0 / fan_in.max(1) as f64).sqrt();
                self.values
                    .extend((0..len).map(|_| F::of(rng.random_range(-bound..=bound))));
            }
        }
        self.infos.push(ParamInfo {
            name,
            shape: shape.to_vec(),
            kind,
            offset,
        });
        ParamId { offset, len }
    }

    pub fn infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<&ParamInfo> {
        self.infos.iter().find(|i| i.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.find(name)
            .map(|i| &self.values[i.offset..i.offset + i.len()])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
