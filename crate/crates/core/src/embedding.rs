//! Decomposed item embeddings: `M` tables of width `d/M` instead of one
//! `d`-wide table, so the parameter count stays `|I|·d` for every `M`.
//!
//! Row 0 of every table is the padding item. It reads as zeros, receives
//! no gradient, and is re-zeroed after each optimizer step.

use fxmm_tensor::{Scalar, Var};

use crate::params::{truncated_normal, Forward, ParamId, Params};
use crate::seed;
use crate::{Error, Result};

pub const PAD: usize = 0;

/// Init std of embedding rows.
pub const INIT_STD: f64 = 0.02;

/// Validated table geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingLayout {
    pub num_items: usize,
    pub dim: usize,
    pub streams: usize,
}

impl EmbeddingLayout {
    pub fn new(num_items: usize, dim: usize, streams: usize) -> Result<Self> {
        if streams == 0 || !dim.is_multiple_of(streams) {
            return Err(Error::config(format!(
                "embedding dim {dim} is not divisible by stream count {streams}"
            )));
        }
        if num_items < 2 {
            return Err(Error::config(format!(
                "need at least one real item besides PAD, got num_items={num_items}"
            )));
        }
        Ok(Self {
            num_items,
            dim,
            streams,
        })
    }

    pub fn stream_width(&self) -> usize {
        self.dim / self.streams
    }

    pub fn param_count(&self) -> usize {
        self.streams * self.num_items * self.stream_width()
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingBank {
    layout: EmbeddingLayout,
    tables: Vec<ParamId>,
}

impl EmbeddingBank {
    /// Registers `M` tables in `params`. Table `k` draws from its own seed
    /// derived from `seed` and `k`.
    pub fn build<T: Scalar>(
        params: &mut Params<T>,
        num_items: usize,
        dim: usize,
        streams: usize,
        seed: u64,
    ) -> Result<Self> {
        let layout = EmbeddingLayout::new(num_items, dim, streams)?;
        let w = layout.stream_width();
        let tables = (0..streams)
            .map(|k| {
                let mut rng = seed::rng(seed, seed::STREAM_INIT, 1_000 + k as u64);
                let mut t = truncated_normal::<T>(&mut rng, vec![num_items, w], INIT_STD);
                t.data_mut()[..w].fill(T::zero());
                params.add(format!("embedding.{k}"), t)
            })
            .collect();
        Ok(Self { layout, tables })
    }

    pub fn layout(&self) -> EmbeddingLayout {
        self.layout
    }

    pub fn num_items(&self) -> usize {
        self.layout.num_items
    }

    pub fn streams(&self) -> usize {
        self.layout.streams
    }

    pub fn width(&self) -> usize {
        self.layout.stream_width()
    }

    pub fn table(&self, k: usize) -> ParamId {
        self.tables[k]
    }

    pub fn tables(&self) -> &[ParamId] {
        &self.tables
    }

    /// Scalar count over the registered tables.
    pub fn param_count<T: Scalar>(&self, params: &Params<T>) -> usize {
        self.tables.iter().map(|&id| params.get(id).numel()).sum()
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().position(|&id| id >= self.layout.num_items) {
            Some(position) => Err(Error::ItemIndex {
                id: ids[position],
                num_items: self.layout.num_items,
                position,
            }),
            None => Ok(()),
        }
    }

    /// Rows of table `k` for `ids` laid out as `[batch × len]`; returns
    /// `[batch × len × d/M]`.
    pub fn lookup<T: Scalar>(
        &self,
        fwd: &mut Forward<'_, T>,
        k: usize,
        ids: &[usize],
        batch: usize,
        len: usize,
    ) -> Result<Var> {
        if k >= self.layout.streams {
            return Err(Error::config(format!(
                "stream {k} out of range for {} streams",
                self.layout.streams
            )));
        }
        if ids.len() != batch * len {
            return Err(Error::config(format!(
                "{} ids do not form a {batch}×{len} batch",
                ids.len()
            )));
        }
        self.check_ids(ids)?;
        let table = fwd.p(self.tables[k]);
        let rows = fwd.tape.gather_rows_padded(table, ids, PAD)?;
        Ok(fwd.tape.reshape(rows, &[batch, len, self.width()])?)
    }

    /// Restores the all-zero padding row in every table.
    pub fn zero_pad_rows<T: Scalar>(&self, params: &mut Params<T>) {
        let w = self.width();
        for &id in &self.tables {
            params.get_mut(id).data_mut()[..w].fill(T::zero());
        }
    }
}
