use crate::error::{Error, Result};

/// Additive value for a disallowed (query, key) pair. Finite so that a fully
/// masked row could never produce NaN; `exp(-1e9)` underflows to exactly zero.
pub const MASK_SENTINEL: f64 = -1e9;

/// Additive attention bias: every entry is either `0` (allowed) or
/// [`MASK_SENTINEL`]. Stored as a compressed per-query list of allowed keys
/// so attention only visits allowed pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionBias {
    queries: usize,
    keys: usize,
    offsets: Vec<usize>,
    key_index: Vec<u32>,
}

impl AttentionBias {
    /// Build from per-query lists of allowed keys (each strictly ascending).
    ///
    /// Square relations must allow the diagonal; rectangular ones must allow
    /// at least one key per query.
    pub fn from_rows<I, R>(queries: usize, keys: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = u32>,
    {
        let mut offsets = Vec::with_capacity(queries + 1);
        let mut key_index = Vec::new();
        offsets.push(0);
        for (q, row) in rows.into_iter().enumerate() {
            if q >= queries {
                return Err(Error::shape("more bias rows than queries"));
            }
            let before = key_index.len();
            for k in row {
                if k as usize >= keys {
                    return Err(Error::shape(format!("key {k} out of range in bias row {q}")));
                }
                if key_index.len() > before && *key_index.last().unwrap() >= k {
                    return Err(Error::shape(format!("bias row {q} is not ascending")));
                }
                key_index.push(k);
            }
            let row = &key_index[before..];
            if row.is_empty() {
                return Err(Error::shape(format!("bias row {q} masks every key")));
            }
            if queries == keys && row.binary_search(&(q as u32)).is_err() {
                return Err(Error::shape(format!("bias diagonal entry {q} is masked")));
            }
            offsets.push(key_index.len());
        }
        if offsets.len() != queries + 1 {
            return Err(Error::shape("fewer bias rows than queries"));
        }
        Ok(Self {
            queries,
            keys,
            offsets,
            key_index,
        })
    }

    /// Build from a row-major dense allow relation of shape `queries x keys`.
    pub fn from_allowed(queries: usize, keys: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != queries * keys {
            return Err(Error::shape(format!(
                "bias needs {} entries, got {}",
                queries * keys,
                allowed.len()
            )));
        }
        Self::from_rows(
            queries,
            keys,
            (0..queries).map(|q| {
                let row = &allowed[q * keys..(q + 1) * keys];
                row.iter()
                    .enumerate()
                    .filter(|(_, &a)| a)
                    .map(|(k, _)| k as u32)
                    .collect::<Vec<_>>()
            }),
        )
    }

    /// Build from dense additive values. Every value must be exactly `0` or
    /// the sentinel.
    pub fn from_values(queries: usize, keys: usize, values: &[f64]) -> Result<Self> {
        let allowed = values
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    Ok(true)
                } else if v == MASK_SENTINEL {
                    Ok(false)
                } else {
                    Err(Error::shape(format!("bias value {v} is neither 0 nor the sentinel")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_allowed(queries, keys, allowed)
    }

    pub fn full(queries: usize, keys: usize) -> Self {
        Self::from_rows(queries, keys, (0..queries).map(|_| 0..keys as u32))
            .expect("an all-allowed bias is valid")
    }

    /// Lower-triangular (causal) relation.
    pub fn causal(n: usize) -> Self {
        Self::from_rows(n, n, (0..n).map(|i| 0..=i as u32)).expect("causal bias is valid")
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn is_allowed(&self, q: usize, k: usize) -> bool {
        self.row_keys(q).binary_search(&(k as u32)).is_ok()
    }

    pub fn value(&self, q: usize, k: usize) -> f64 {
        if self.is_allowed(q, k) {
            0.0
        } else {
            MASK_SENTINEL
        }
    }

    /// Keys visible to query `q`, ascending.
    pub fn row_keys(&self, q: usize) -> &[u32] {
        &self.key_index[self.offsets[q]..self.offsets[q + 1]]
    }

    pub(crate) fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Number of allowed pairs.
    pub fn nnz(&self) -> usize {
        self.key_index.len()
    }

    /// Dense row-major allow relation.
    pub fn to_allowed(&self) -> Vec<bool> {
        let mut out = vec![false; self.queries * self.keys];
        for q in 0..self.queries {
            for &k in self.row_keys(q) {
                out[q * self.keys + k as usize] = true;
            }
        }
        out
    }

    pub fn to_dense(&self) -> Vec<f64> {
        self.to_allowed()
            .into_iter()
            .map(|a| if a { 0.0 } else { MASK_SENTINEL })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_rows() {
        let b = AttentionBias::causal(3);
        assert_eq!(b.row_keys(0), &[0]);
        assert_eq!(b.row_keys(2), &[0, 1, 2]);
        assert_eq!(b.nnz(), 6);
        assert_eq!(b.value(0, 2), MASK_SENTINEL);
    }

    #[test]
    fn masked_diagonal_is_rejected() {
        let err = AttentionBias::from_allowed(2, 2, vec![false, true, true, true]);
        assert!(err.is_err());
    }

    #[test]
    fn values_must_be_zero_or_sentinel() {
        assert!(AttentionBias::from_values(1, 1, &[-5.0]).is_err());
        let b = AttentionBias::from_values(2, 2, &[0.0, MASK_SENTINEL, 0.0, 0.0]).unwrap();
        assert_eq!(b, AttentionBias::causal(2));
        assert_eq!(b.to_dense(), vec![0.0, MASK_SENTINEL, 0.0, 0.0]);
    }
}
