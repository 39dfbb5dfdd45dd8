//! Flat parameter storage.
//!
//! Every model keeps its parameters in one contiguous `Vec<f64>` described
//! by a [`Layout`]: named, shaped slices at fixed offsets. The same layout
//! doubles as the manifest sent alongside flattened parameter vectors and
//! as the checkpoint header.

use std::sync::Arc;

use fedda_autograd::{Checkpoint, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Running statistics are stored and aggregated but never receive
    /// gradients.
    pub trainable: bool,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Initial value rule for a parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in ±1/√fan_in.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Layout {
    specs: Vec<ParamSpec>,
    inits: Vec<Init>,
    total: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init, trainable: bool) -> ParamId {
        let spec = ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
            trainable,
        };
        self.total += spec.len();
        self.specs.push(spec);
        self.inits.push(init);
        ParamId(self.specs.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    /// `(name, shape)` pairs in storage order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.specs.iter().map(|s| (s.name.clone(), s.shape.clone())).collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_len(&self) -> usize {
        self.specs.iter().filter(|s| s.trainable).map(ParamSpec::len).sum()
    }

    pub fn init<R: Rng + ?Sized>(self: &Arc<Self>, rng: &mut R) -> Params {
        let mut values = vec![0.0; self.total];
        for (spec, init) in self.specs.iter().zip(&self.inits) {
            let dst = &mut values[spec.offset..spec.offset + spec.len()];
            match *init {
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    dst.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
                }
                Init::Zeros => dst.iter_mut().for_each(|v| *v = 0.0),
                Init::Ones => dst.iter_mut().for_each(|v| *v = 1.0),
            }
        }
        Params {
            layout: Arc::clone(self),
            values,
        }
    }
}

/// Parameter values laid out by a shared [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl Params {
    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Dimension(format!(
                "layout holds {} values, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(Params { layout, values })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        let s = self.layout.spec(id);
        &self.values[s.offset..s.offset + s.len()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let (offset, len) = {
            let s = self.layout.spec(id);
            (s.offset, s.len())
        };
        &mut self.values[offset..offset + len]
    }

    pub fn tensor(&self, id: ParamId) -> Tensor {
        let s = self.layout.spec(id);
        Tensor::new(s.shape.clone(), self.get(id).to_vec()).expect("layout-consistent tensor")
    }

    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Dimension(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.layout.manifest(), self.values.clone()).expect("layout-consistent checkpoint")
    }

    /// Loads values from a checkpoint whose header must match this layout.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.entries != self.layout.manifest() {
            return Err(Error::Protocol("checkpoint manifest does not match model layout".into()));
        }
        self.set_values(&ck.values)
    }
}

/// Lazily places parameters on a tape as leaves and collects their
/// gradients back into a flat buffer after `backward`.
pub struct Binding<'a> {
    params: &'a Params,
    vars: Vec<Option<Var>>,
    track: bool,
}

impl<'a> Binding<'a> {
    /// With `track`, trainable parameters become gradient-requiring leaves.
    pub fn new(params: &'a Params, track: bool) -> Self {
        Binding {
            params,
            vars: vec![None; params.layout.specs.len()],
            track,
        }
    }

    pub fn params(&self) -> &'a Params {
        self.params
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let trainable = self.params.layout.spec(id).trainable;
        let v = tape.leaf(self.params.tensor(id), self.track && trainable);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn raw(&self, id: ParamId) -> &'a [f64] {
        self.params.get(id)
    }

    /// Flat gradient matching the layout; zeros where nothing flowed.
    pub fn gradients(&self, tape: &Tape) -> Vec<f64> {
        let mut out = vec![0.0; self.params.layout.len()];
        for (spec, var) in self.params.layout.specs.iter().zip(&self.vars) {
            if let Some(g) = var.and_then(|v| tape.grad(v)) {
                out[spec.offset..spec.offset + spec.len()].copy_from_slice(g.values());
            }
        }
        out
    }
}
