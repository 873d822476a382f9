use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    BnScale,
    BnShift,
    ConvKernel,
    LinearWeight,
    LinearBias,
}

impl LayerKind {
    pub fn is_bn(self) -> bool {
        matches!(self, Self::BnScale | Self::BnShift)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Self::BnScale => 0,
            Self::BnShift => 1,
            Self::ConvKernel => 2,
            Self::LinearWeight => 3,
            Self::LinearBias => 4,
        }
    }

    pub(crate) fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Self::BnScale,
            1 => Self::BnShift,
            2 => Self::ConvKernel,
            3 => Self::LinearWeight,
            4 => Self::LinearBias,
            other => return Err(Error::Format(format!("unknown layer kind code {other}"))),
        })
    }
}

/// A named tensor tagged with the kind of layer it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: &str, kind: LayerKind, shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            kind,
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered model parameters. Iteration order is the construction order and
/// never changes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
}

/// Gradients, congruent with a [`ParamSet`] entry by entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    tensors: Vec<Tensor>,
}

fn check_unique(tensors: &[Tensor]) -> Result<()> {
    for (i, t) in tensors.iter().enumerate() {
        if tensors[..i].iter().any(|o| o.name == t.name) {
            return Err(Error::InvalidArgument(format!("duplicate tensor name `{}`", t.name)));
        }
        if t.data.len() != t.shape.iter().product::<usize>() {
            return Err(Error::Dimension(format!("tensor `{}` length/shape mismatch", t.name)));
        }
    }
    Ok(())
}

macro_rules! tensor_list {
    ($ty:ident) => {
        impl $ty {
            pub fn new(tensors: Vec<Tensor>) -> Result<Self> {
                check_unique(&tensors)?;
                Ok(Self { tensors })
            }

            pub fn iter(&self) -> std::slice::Iter<'_, Tensor> {
                self.tensors.iter()
            }

            pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Tensor> {
                self.tensors.iter_mut()
            }

            pub fn len(&self) -> usize {
                self.tensors.len()
            }

            pub fn is_empty(&self) -> bool {
                self.tensors.is_empty()
            }

            pub fn get(&self, index: usize) -> &Tensor {
                &self.tensors[index]
            }

            pub fn get_mut(&mut self, index: usize) -> &mut Tensor {
                &mut self.tensors[index]
            }

            pub fn by_name(&self, name: &str) -> Option<&Tensor> {
                self.tensors.iter().find(|t| t.name == name)
            }

            /// Total number of scalar entries.
            pub fn numel(&self) -> usize {
                self.tensors.iter().map(Tensor::len).sum()
            }
        }
    };
}

tensor_list!(ParamSet);
tensor_list!(GradSet);

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            tensors: params
                .iter()
                .map(|p| Tensor::zeros(&p.name, p.kind, &p.shape))
                .collect(),
        }
    }

    /// Errors unless every entry matches `params` in name, kind and shape.
    pub fn check_congruent(&self, params: &ParamSet) -> Result<()> {
        if self.len() != params.len() {
            return Err(Error::Dimension(format!(
                "gradient set has {} entries, parameters have {}",
                self.len(),
                params.len()
            )));
        }
        for (g, p) in self.iter().zip(params.iter()) {
            if g.name != p.name || g.kind != p.kind || g.shape != p.shape {
                return Err(Error::Dimension(format!(
                    "gradient `{}` does not match parameter `{}`",
                    g.name, p.name
                )));
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v *= factor;
            }
        }
    }
}
