use super::config::{Init, ModelConfig};
use super::{PinnError, Result};
use midband_autodiff::{read_checkpoint, write_checkpoint, Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::{Read, Write};

/// Checkpoint entry holding the channel normalization constant.
pub const NORM_ENTRY: &str = "norm.c";

/// Named parameter tensors in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ModelParams<T> {
    /// Draws a fresh parameter set for `cfg`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = cfg
            .layout()
            .into_iter()
            .map(|spec| {
                let t = match spec.init {
                    Init::FanIn(fan_in) => Tensor::uniform(&spec.shape, (3.0 / fan_in as f64).sqrt(), &mut rng),
                    Init::Zeros => Tensor::zeros(&spec.shape),
                    Init::Ones => Tensor::full(&spec.shape, T::one()),
                };
                (spec.name, t)
            })
            .collect();
        Ok(Self::from_entries(entries))
    }

    /// Same names and shapes as `cfg`, every value zero.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::from_entries(
            cfg.layout()
                .into_iter()
                .map(|s| (s.name, Tensor::zeros(&s.shape)))
                .collect(),
        )
    }

    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Self {
        let index = entries.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        let (names, tensors) = entries.into_iter().unzip();
        Self { names, tensors, index }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Fails unless names and shapes match `cfg` exactly.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = cfg.layout();
        if layout.len() != self.len() {
            return Err(PinnError::ArchitectureMismatch(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.len()
            )));
        }
        for (spec, (name, t)) in layout.iter().zip(self.names.iter().zip(&self.tensors)) {
            if spec.name != *name || spec.shape != t.shape() {
                return Err(PinnError::ArchitectureMismatch(format!(
                    "expected {} {:?}, found {} {:?}",
                    spec.name,
                    spec.shape,
                    name,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Registers every tensor as a trainable leaf of `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<T>) -> ParamVars<'a, T> {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        ParamVars { params: self, vars }
    }
}

/// Tape handles for a bound parameter set.
pub struct ParamVars<'a, T> {
    params: &'a ModelParams<T>,
    vars: Vec<Var>,
}

impl<T: Real> ParamVars<'_, T> {
    /// Handle of the named tensor; panics on names outside the layout,
    /// which would be a programming error in the model code.
    pub fn get(&self, name: &str) -> Var {
        match self.params.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter {name} is not part of the layout"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients of every tensor after `backward`, zeros for tensors that
    /// did not influence the loss.
    pub fn take_grads(&self, tape: &mut Tape<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(&self.params.tensors)
            .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Parameters together with the channel normalization constant they were
/// trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams<f32>,
    pub norm_c: f64,
}

impl TrainedModel {
    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let c = Tensor::<f32>::scalar(self.norm_c as f32);
        let mut entries: Vec<(&str, &Tensor<f32>)> = vec![(NORM_ENTRY, &c)];
        entries.extend(self.params.names.iter().map(String::as_str).zip(&self.params.tensors));
        write_checkpoint(w, &entries)?;
        Ok(())
    }

    pub fn load<R: Read>(r: R, cfg: &ModelConfig) -> Result<Self> {
        let mut entries: Vec<(String, Tensor<f32>)> = read_checkpoint(r)?;
        let pos = entries
            .iter()
            .position(|(n, _)| n == NORM_ENTRY)
            .ok_or_else(|| PinnError::ArchitectureMismatch(format!("missing {NORM_ENTRY}")))?;
        let (_, c) = entries.remove(pos);
        let params = ModelParams::from_entries(entries);
        params.check_against(cfg)?;
        Ok(Self {
            params,
            norm_c: c.data()[0] as f64,
        })
    }
}
