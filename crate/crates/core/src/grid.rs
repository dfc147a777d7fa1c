/// Dense scalar array laid out depth-major as `(d, h, w)`.
///
/// Used for volumes, sub-volumes (`Q x M x M`) and 2-D images (`1 x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Grid3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![0.0; dims[0] * dims[1] * dims[2]] }
    }

    pub fn filled(dims: [usize; 3], value: f64) -> Self {
        Self { dims, data: vec![value; dims[0] * dims[1] * dims[2]] }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Self {
        assert_eq!(dims[0] * dims[1] * dims[2], data.len(), "grid dims do not match data length");
        Self { dims, data }
    }

    pub fn image(h: usize, w: usize, data: Vec<f64>) -> Self {
        Self::from_vec([1, h, w], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f64) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
