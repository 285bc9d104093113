//! Named parameter store with mirrored gradient buffers.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Mat;

/// Index of a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) u32);

/// Flat collection of named parameters and their gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    grads: Vec<Mat>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Mat) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len() as u32);
        self.grads.push(Mat::zeros(value.rows, value.cols));
        self.values.push(value);
        self.names.push(name.to_string());
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Uniform fan-in initialization U(-1/√fan_in, 1/√fan_in).
    pub fn add_affine_weight(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let m = Mat::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound));
        self.add(name, m)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros(rows, cols))
    }

    pub fn add_ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::from_vec(rows, cols, vec![1.0; rows * cols]))
    }

    pub fn id(&self, name: &str) -> ParamId {
        self.by_name[name]
    }

    pub fn try_id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0 as usize]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len() as u32).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0 as usize]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0 as usize]
    }

    pub fn grad(&self, id: ParamId) -> &Mat {
        &self.grads[id.0 as usize]
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Mat) {
        let slot = &mut self.grads[id.0 as usize];
        debug_assert_eq!(slot.rows, g.rows);
        debug_assert_eq!(slot.cols, g.cols);
        for (o, v) in slot.data.iter_mut().zip(&g.data) {
            *o += v;
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data.fill(0.0);
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(Mat::sq_norm).sum::<f64>().sqrt()
    }

    /// Copy values from `other` for every name present in `self`.
    /// Panics if a name is missing in `other`.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        for i in 0..self.values.len() {
            let src = other.by_name[&self.names[i]];
            let src_val = other.value(src);
            assert_eq!(self.values[i].rows, src_val.rows);
            assert_eq!(self.values[i].cols, src_val.cols);
            self.values[i].data.copy_from_slice(&src_val.data);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn fan_in_bounds_hold() {
        let mut r = rng::stream(1, "init", 0);
        let mut s = ParamStore::new();
        let id = s.add_affine_weight("w", 16, 8, &mut r);
        let bound = 1.0 / 4.0;
        assert!(s.value(id).data.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn name_sync_copies_by_name() {
        let mut a = ParamStore::new();
        a.add("x", Mat::scalar(1.0));
        a.add("y", Mat::scalar(2.0));
        let mut b = ParamStore::new();
        b.add("y", Mat::scalar(0.0));
        b.copy_values_from(&a);
        assert_eq!(b.value(b.id("y")).data[0], 2.0);
    }
}
