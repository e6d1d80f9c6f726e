use super::{CategoricalDistribution, ConditionalModel, TokenId, Vocabulary};
use crate::error::{Error, Result};

/// Largest table (rows × ids) a grammar may hold.
const MAX_TABLE_ENTRIES: usize = 1 << 24;

/// Exact order-`m` conditional tables: one row per context of the last `m`
/// ids, with short contexts left-padded with BOS.
#[derive(Debug, Clone, PartialEq)]
pub struct GrammarOracle {
    vocab: Vocabulary,
    order: usize,
    seed: u64,
    /// `rows × vocab.total()` probabilities, row-major.
    table: Vec<f64>,
}

impl GrammarOracle {
    /// Number of rows an order-`order` table over `vocab` holds.
    pub fn row_count(vocab: &Vocabulary, order: usize) -> Result<usize> {
        let ids = vocab.total();
        let mut rows: usize = 1;
        for _ in 0..order {
            rows = rows
                .checked_mul(ids)
                .filter(|r| r.saturating_mul(ids) <= MAX_TABLE_ENTRIES)
                .ok_or_else(|| Error::invalid(format!("order-{order} table over {ids} ids is too large")))?;
        }
        Ok(rows)
    }

    /// Builds a table by evaluating `row_fn` for every row index.
    pub fn from_fn(
        vocab: Vocabulary,
        order: usize,
        seed: u64,
        mut row_fn: impl FnMut(usize) -> Result<CategoricalDistribution>,
    ) -> Result<Self> {
        let rows = Self::row_count(&vocab, order)?;
        let ids = vocab.total();
        let mut table = Vec::with_capacity(rows * ids);
        for r in 0..rows {
            let row = row_fn(r)?;
            if row.len() != ids {
                return Err(Error::ShapeMismatch(format!("row {r} has {} ids, expected {ids}", row.len())));
            }
            table.extend_from_slice(row.probs());
        }
        Ok(Self { vocab, order, seed, table })
    }

    /// Order-0 oracle returning `row` for every context.
    pub fn constant(vocab: Vocabulary, row: CategoricalDistribution) -> Result<Self> {
        Self::from_fn(vocab, 0, 0, |_| Ok(row.clone()))
    }

    /// Rebuilds from a flat table, validating every row.
    pub fn from_table(vocab: Vocabulary, order: usize, seed: u64, table: Vec<f64>) -> Result<Self> {
        let rows = Self::row_count(&vocab, order)?;
        let ids = vocab.total();
        if table.len() != rows * ids {
            return Err(Error::ShapeMismatch(format!("table has {} entries, expected {}", table.len(), rows * ids)));
        }
        for chunk in table.chunks(ids) {
            CategoricalDistribution::new(chunk.to_vec())?;
        }
        Ok(Self { vocab, order, seed, table })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rows(&self) -> usize {
        self.table.len() / self.vocab.total()
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// The last `order` ids of `context`, BOS-padded on the left.
    pub fn context_key(&self, context: &[TokenId]) -> Vec<TokenId> {
        let m = self.order;
        let mut key = vec![self.vocab.bos(); m.saturating_sub(context.len())];
        key.extend_from_slice(&context[context.len().saturating_sub(m)..]);
        key
    }

    /// Row index for a context; ids are validated.
    pub fn row_index(&self, context: &[TokenId]) -> Result<usize> {
        let ids = self.vocab.total();
        let mut idx = 0;
        for t in self.context_key(context) {
            self.vocab.check(t)?;
            idx = idx * ids + t.index();
        }
        Ok(idx)
    }

    /// Inverse of [`Self::row_index`]: the `order` ids addressing `row`.
    pub fn row_key(&self, mut row: usize) -> Vec<TokenId> {
        let ids = self.vocab.total();
        let mut key = vec![TokenId(0); self.order];
        for slot in key.iter_mut().rev() {
            *slot = TokenId((row % ids) as u32);
            row /= ids;
        }
        key
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let ids = self.vocab.total();
        &self.table[row * ids..(row + 1) * ids]
    }

    /// Overwrites the row addressed by `context`.
    pub fn set_row(&mut self, context: &[TokenId], dist: &CategoricalDistribution) -> Result<()> {
        let ids = self.vocab.total();
        if dist.len() != ids {
            return Err(Error::ShapeMismatch(format!("row has {} ids, expected {ids}", dist.len())));
        }
        let r = self.row_index(context)?;
        self.table[r * ids..(r + 1) * ids].copy_from_slice(dist.probs());
        Ok(())
    }
}

impl ConditionalModel for GrammarOracle {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn conditional(&self, context: &[TokenId], tau: f64) -> Result<CategoricalDistribution> {
        let r = self.row_index(context)?;
        let row = CategoricalDistribution { probs: self.row(r).to_vec() };
        if tau == 1.0 {
            Ok(row)
        } else {
            row.with_temperature(tau)
        }
    }

    fn context_window(&self) -> Option<usize> {
        Some(self.order)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(2).unwrap()
    }

    #[test]
    fn order_zero_returns_single_row() {
        let v = vocab();
        let row = CategoricalDistribution::new(vec![0.1, 0.2, 0.0, 0.7, 0.0]).unwrap();
        let g = GrammarOracle::constant(v, row.clone()).unwrap();
        for ctx in [vec![v.bos()], vec![v.bos(), TokenId(0), TokenId(1)]] {
            assert_eq!(g.conditional(&ctx, 1.0).unwrap(), row);
        }
    }

    #[test]
    fn set_row_is_returned_exactly() {
        let v = vocab();
        let mut g = GrammarOracle::from_fn(v, 1, 0, |_| Ok(CategoricalDistribution::uniform(5))).unwrap();
        let row = CategoricalDistribution::new(vec![0.6, 0.4, 0.0, 0.0, 0.0]).unwrap();
        g.set_row(&[TokenId(0)], &row).unwrap();
        let got = g.conditional(&[v.bos(), TokenId(1), TokenId(0)], 1.0).unwrap();
        assert_eq!(got.probs(), &[0.6, 0.4, 0.0, 0.0, 0.0]);
        // Repeated queries never drift.
        for _ in 0..10 {
            assert_eq!(g.conditional(&[TokenId(0)], 1.0).unwrap(), got);
        }
    }

    #[test]
    fn short_contexts_are_bos_padded() {
        let v = vocab();
        let g = GrammarOracle::from_fn(v, 2, 0, |_| Ok(CategoricalDistribution::uniform(5))).unwrap();
        assert_eq!(g.context_key(&[TokenId(1)]), vec![v.bos(), TokenId(1)]);
        assert_eq!(g.row_index(&[TokenId(1)]).unwrap(), g.row_index(&[v.bos(), TokenId(1)]).unwrap());
        let r = g.row_index(&[TokenId(0), TokenId(1)]).unwrap();
        assert_eq!(g.row_key(r), vec![TokenId(0), TokenId(1)]);
    }

    #[test]
    fn out_of_vocabulary_context_is_rejected() {
        let g = GrammarOracle::from_fn(vocab(), 1, 0, |_| Ok(CategoricalDistribution::uniform(5))).unwrap();
        assert!(g.conditional(&[TokenId(9)], 1.0).is_err());
    }

    #[test]
    fn oversized_tables_are_refused() {
        let v = Vocabulary::new(1000).unwrap();
        assert!(GrammarOracle::row_count(&v, 3).is_err());
    }
}
