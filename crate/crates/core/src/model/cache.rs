/// Per-layer key/value rows for every committed position.
///
/// Rows are `d_model` wide (all heads side by side). Truncation only shortens
/// the buffers, so a rolled-back cache holds exactly the values a fresh
/// prefix run would have written.
#[derive(Clone, Debug)]
pub struct KvCache {
    d_model: usize,
    max_seq_len: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize, d_model: usize, max_seq_len: usize) -> Self {
        Self {
            d_model,
            max_seq_len,
            keys: vec![Vec::with_capacity(max_seq_len * d_model); n_layers],
            values: vec![Vec::with_capacity(max_seq_len * d_model); n_layers],
            len: 0,
        }
    }

    /// Number of committed positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.max_seq_len
    }

    pub(crate) fn push(&mut self, layer: usize, key: &[f32], value: &[f32]) {
        debug_assert_eq!(key.len(), self.d_model);
        debug_assert_eq!(self.keys[layer].len(), self.len * self.d_model);
        self.keys[layer].extend_from_slice(key);
        self.values[layer].extend_from_slice(value);
    }

    /// Mark the position written by the last round of `push` calls as committed.
    pub(crate) fn commit(&mut self) {
        self.len += 1;
        debug_assert!(self.len <= self.max_seq_len);
    }

    pub(crate) fn layer(&self, layer: usize) -> (&[f32], &[f32]) {
        (&self.keys[layer], &self.values[layer])
    }

    pub fn truncate(&mut self, len: usize) {
        let len = len.min(self.len);
        for buf in self.keys.iter_mut().chain(self.values.iter_mut()) {
            buf.truncate(len * self.d_model);
        }
        self.len = len;
    }
}
