//! Named flat parameter tensors shared by the field, the discriminators,
//! the optimizer and the checkpoint format.

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { name: name.into(), shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub tensors: Vec<ParamTensor>,
}

impl ParamSet {
    pub fn new(tensors: Vec<ParamTensor>) -> Self {
        Self { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape == b.shape && a.data.len() == b.data.len())
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn fill(&mut self, v: f64) {
        self.tensors.iter_mut().for_each(|t| t.data.iter_mut().for_each(|x| *x = v));
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().for_each(|t| t.data.iter_mut().for_each(|x| *x *= s));
    }

    /// `self += s * other`; layouts must match.
    pub fn add_scaled(&mut self, other: &ParamSet, s: f64) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += s * y);
        }
    }

    pub fn iter_scalars(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }

    pub fn scalar_mut(&mut self, mut flat: usize) -> &mut f64 {
        for t in &mut self.tensors {
            if flat < t.data.len() {
                return &mut t.data[flat];
            }
            flat -= t.data.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn all_finite(&self) -> bool {
        self.iter_scalars().all(f64::is_finite)
    }

    /// Order-sensitive hash of the exact bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in &t.data {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn max_abs(&self) -> f64 {
        self.iter_scalars().fold(0.0, |m, v| m.max(v.abs()))
    }
}
