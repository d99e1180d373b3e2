//! Last-token head activations and the `FASBACT1` file format.
//!
//! Layout: the 8 magic bytes, then `n_samples`, `n_layers`, `n_heads`,
//! `d_head` as u32 LE, then f32 LE activations in
//! `[sample, layer, head, dim]` row-major order, then one label byte per sample.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::files::{read_file, write_file};
use crate::model::{Backend, HeadId, ModelConfig, TokenId};

pub const MAGIC: &[u8; 8] = b"FASBACT1";

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSet {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    data: Vec<f32>,
    labels: Vec<u8>,
}

/// One sample's view: `[layer, head, dim]`.
#[derive(Clone, Copy, Debug)]
pub struct ActivationRecord<'a> {
    pub sample_id: usize,
    pub label: u8,
    activations: &'a [f32],
    n_heads: usize,
    d_head: usize,
}

impl<'a> ActivationRecord<'a> {
    pub fn head(&self, head: HeadId) -> &'a [f32] {
        let off = (head.layer * self.n_heads + head.head) * self.d_head;
        &self.activations[off..off + self.d_head]
    }

    pub fn activations(&self) -> &'a [f32] {
        self.activations
    }
}

impl ActivationSet {
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        d_head: usize,
        data: Vec<f32>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let per = n_layers * n_heads * d_head;
        if data.len() != per * labels.len() {
            return Err(Error::Shape(format!(
                "{} floats for {} samples of {n_layers}x{n_heads}x{d_head}",
                data.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Precondition(format!(
                "label must be 0 or 1, got {l}"
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Degenerate("non-finite activation".into()));
        }
        Ok(Self {
            n_layers,
            n_heads,
            d_head,
            data,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.len(), self.n_layers, self.n_heads, self.d_head]
    }

    fn per_sample(&self) -> usize {
        self.n_layers * self.n_heads * self.d_head
    }

    pub fn record(&self, i: usize) -> ActivationRecord<'_> {
        let per = self.per_sample();
        ActivationRecord {
            sample_id: i,
            label: self.labels[i],
            activations: &self.data[i * per..(i + 1) * per],
            n_heads: self.n_heads,
            d_head: self.d_head,
        }
    }

    pub fn records(&self) -> impl Iterator<Item = ActivationRecord<'_>> {
        (0..self.len()).map(|i| self.record(i))
    }

    pub fn heads(&self) -> Vec<HeadId> {
        (0..self.n_layers)
            .flat_map(|l| (0..self.n_heads).map(move |h| HeadId::new(l, h)))
            .collect()
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let per = self.per_sample();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Self {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_head: self.d_head,
            data,
            labels,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 16 + self.data.len() * 4 + self.labels.len());
        out.extend_from_slice(MAGIC);
        for v in [self.len(), self.n_layers, self.n_heads, self.d_head] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err("missing FASBACT1 header".into());
        }
        let field = |i: usize| {
            u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize
        };
        let (n, l, h, d) = (field(0), field(1), field(2), field(3));
        let floats = n * l * h * d;
        let expected = 24 + floats * 4 + n;
        if bytes.len() != expected {
            return Err(format!(
                "expected {expected} bytes for shape [{n}, {l}, {h}, {d}], found {}",
                bytes.len()
            ));
        }
        let data = bytes[24..24 + floats * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let labels = bytes[24 + floats * 4..].to_vec();
        Self::new(l, h, d, data, labels).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?).map_err(|m| Error::malformed(path, m))
    }
}

/// Run every sample through the backend and keep each head's pre-`W_O`
/// output at the sample's final token.
pub fn extract_activations<B>(backend: &B, samples: &[(Vec<TokenId>, u8)]) -> Result<ActivationSet>
where
    B: Backend + Sync,
{
    let config: &ModelConfig = backend.config();
    let heads = config.all_heads();
    let rows: Vec<Vec<f32>> = samples
        .par_iter()
        .map(|(tokens, _)| {
            let (_, out) = backend.prime(tokens, &heads)?;
            let mut row = Vec::with_capacity(heads.len() * config.d_head);
            for h in &heads {
                let act = out.head_activations.get(h).ok_or_else(|| {
                    Error::Shape(format!("backend returned no activation for {h}"))
                })?;
                row.extend_from_slice(act);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    ActivationSet::new(
        config.n_layers,
        config.n_heads,
        config.d_head,
        rows.concat(),
        samples.iter().map(|(_, l)| *l).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> ActivationSet {
        let data: Vec<f32> = (0..3 * 2 * 2 * 2).map(|i| i as f32 * 0.5).collect();
        ActivationSet::new(2, 2, 2, data, vec![1, 0, 1]).unwrap()
    }

    #[test]
    fn byte_layout() {
        let s = set();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..8], b"FASBACT1");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 24 + 24 * 4 + 3);
        assert_eq!(&bytes[bytes.len() - 3..], &[1, 0, 1]);
        assert_eq!(ActivationSet::from_bytes(&bytes).unwrap(), s);
    }

    #[test]
    fn record_head_slices() {
        let s = set();
        let r = s.record(1);
        // sample 1 starts at float 8; head (1,0) is slot 2
        assert_eq!(r.head(HeadId::new(1, 0)), &[6.0, 6.5]);
        assert_eq!(r.label, 0);
        assert_eq!(s.subset(&[2, 0]).labels(), &[1, 1]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ActivationSet::from_bytes(b"FASBACT0").is_err());
        let mut bytes = set().to_bytes();
        bytes.pop();
        assert!(ActivationSet::from_bytes(&bytes).is_err());
        assert!(ActivationSet::new(1, 1, 1, vec![f32::NAN], vec![0]).is_err());
        assert!(ActivationSet::new(1, 1, 1, vec![0.0], vec![2]).is_err());
    }
}
