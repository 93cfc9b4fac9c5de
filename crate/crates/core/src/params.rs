//! Uniform view over trainable tensors so the optimizer, checkpointing and
//! gradient checks can treat every model the same way.

use ndarray::Array2;

/// Where a tensor lives; drives layer freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Embeddings,
    /// Transformer block, 1-based.
    Layer(usize),
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub group: ParamGroup,
    /// Normalization gains and biases are excluded from weight decay.
    pub decay: bool,
}

pub trait Parameters: Clone {
    fn infos(&self) -> Vec<ParamInfo>;
    fn tensors(&self) -> Vec<&Array2<f64>>;
    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>>;

    /// Same shapes, all zeros. Used as a gradient accumulator.
    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }

    fn sq_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Per-tensor flag: excluded from updates.
    fn frozen(&self) -> Vec<bool> {
        vec![false; self.tensors().len()]
    }
}

/// Two parameter sets trained together, typically encoder and head.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint<A, B> {
    pub first: A,
    pub second: B,
}

impl<A: Parameters, B: Parameters> Parameters for Joint<A, B> {
    fn infos(&self) -> Vec<ParamInfo> {
        let mut v = self.first.infos();
        v.extend(self.second.infos());
        v
    }

    fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut v = self.first.tensors();
        v.extend(self.second.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = self.first.tensors_mut();
        v.extend(self.second.tensors_mut());
        v
    }

    fn frozen(&self) -> Vec<bool> {
        let mut v = self.first.frozen();
        v.extend(self.second.frozen());
        v
    }
}

/// A 1×n row used for biases and normalization parameters.
pub fn row(values: Vec<f64>) -> Array2<f64> {
    let n = values.len();
    Array2::from_shape_vec((1, n), values).expect("row shape")
}

pub fn bias(infos: &mut Vec<ParamInfo>, name: impl Into<String>, group: ParamGroup) {
    infos.push(ParamInfo { name: name.into(), group, decay: false });
}

pub fn weight(infos: &mut Vec<ParamInfo>, name: impl Into<String>, group: ParamGroup) {
    infos.push(ParamInfo { name: name.into(), group, decay: true });
}
