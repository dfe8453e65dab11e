use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One shot's encoded caption: `len × d_text` token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionEntry<S> {
    pub shot: usize,
    pub tokens: Tensor<S>,
    /// Replaced by the denoiser's learned null embedding when set.
    pub dropped: bool,
}

/// Per-shot captions. Entry order is irrelevant: shot binding comes only from
/// each entry's `shot` index.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionBundle<S> {
    entries: Vec<CaptionEntry<S>>,
}

impl<S: Scalar> CaptionBundle<S> {
    /// Requires shot indices `0..S` each exactly once and a common width.
    pub fn new(entries: Vec<CaptionEntry<S>>) -> Result<Self> {
        let s = entries.len();
        if s == 0 {
            return Err(Error::Config("caption bundle is empty".into()));
        }
        let mut seen = vec![false; s];
        for e in &entries {
            if e.shot >= s || seen[e.shot] {
                return Err(Error::Config(format!(
                    "caption shot indices must be a permutation of 0..{s}"
                )));
            }
            seen[e.shot] = true;
        }
        let width = entries[0].tokens.cols();
        if entries
            .iter()
            .any(|e| e.tokens.cols() != width || e.tokens.dims().len() != 2 || e.tokens.rows() == 0)
        {
            return shape_err("caption entries must be non-empty matrices of one width");
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[CaptionEntry<S>] {
        &self.entries
    }

    pub fn shot_count(&self) -> usize {
        self.entries.len()
    }

    pub fn width(&self) -> usize {
        self.entries[0].tokens.cols()
    }

    pub fn token_count(&self) -> usize {
        self.entries.iter().map(|e| e.tokens.rows()).sum()
    }

    /// Concatenated token rows (in entry order), each row's shot index, and
    /// each row's dropped flag.
    pub fn flatten(&self) -> (Tensor<S>, Vec<usize>, Vec<bool>) {
        let parts: Vec<&Tensor<S>> = self.entries.iter().map(|e| &e.tokens).collect();
        let rows = Tensor::concat_rows(&parts).expect("validated widths");
        let mut shots = Vec::with_capacity(rows.rows());
        let mut dropped = Vec::with_capacity(rows.rows());
        for e in &self.entries {
            shots.extend(std::iter::repeat(e.shot).take(e.tokens.rows()));
            dropped.extend(std::iter::repeat(e.dropped).take(e.tokens.rows()));
        }
        (rows, shots, dropped)
    }

    /// Every entry marked dropped (the unconditional branch of guidance).
    pub fn all_dropped(&self) -> Self {
        let mut out = self.clone();
        out.entries.iter_mut().for_each(|e| e.dropped = true);
        out
    }

    pub fn with_dropped(&self, flags: &[bool]) -> Result<Self> {
        if flags.len() != self.entries.len() {
            return shape_err("one dropout flag per caption entry");
        }
        let mut out = self.clone();
        for (e, &f) in out.entries.iter_mut().zip(flags) {
            e.dropped = f;
        }
        Ok(out)
    }

    /// Same entries in a different list order.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.entries.len() {
            return shape_err("reorder needs one index per entry");
        }
        Self::new(order.iter().map(|&i| self.entries[i].clone()).collect())
    }

    /// Prepends `embedding` to every shot's token sequence. The new row inherits
    /// the shot index of its caption, so TaRoPE binds it to that shot.
    pub fn condition_identity(&self, embedding: &[S]) -> Result<Self> {
        if embedding.len() != self.width() {
            return shape_err(format!(
                "identity embedding has {} dims, captions have {}",
                embedding.len(),
                self.width()
            ));
        }
        let id_row = Tensor::new(vec![1, embedding.len()], embedding.to_vec())?;
        let entries = self
            .entries
            .iter()
            .map(|e| {
                Ok(CaptionEntry {
                    shot: e.shot,
                    tokens: Tensor::concat_rows(&[&id_row, &e.tokens])?,
                    dropped: e.dropped,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }
}

/// See [`CaptionBundle::condition_identity`].
pub fn condition_identity<S: Scalar>(captions: &CaptionBundle<S>, id_embedding: &[S]) -> Result<CaptionBundle<S>> {
    captions.condition_identity(id_embedding)
}
