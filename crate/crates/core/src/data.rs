//! Datasets of fixed-length numeric records.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// An immutable collection of `n >= 1` records, each `record_len` scalars long.
///
/// Records are stored contiguously; what a record means is up to the problem
/// that consumes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct Dataset<S> {
    record_len: usize,
    values: Vec<S>,
}

impl<S: Real> Dataset<S> {
    pub fn from_records(records: &[Vec<S>]) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::Dataset("dataset must contain at least one record".into()))?;
        let record_len = first.len();
        let mut values = Vec::with_capacity(records.len() * record_len);
        for (i, r) in records.iter().enumerate() {
            if r.len() != record_len {
                return Err(Error::Dataset(format!("record {i} has {} fields, expected {record_len}", r.len())));
            }
            values.extend_from_slice(r);
        }
        Self::from_flat(record_len, values)
    }

    pub fn from_flat(record_len: usize, values: Vec<S>) -> Result<Self> {
        if record_len == 0 || values.is_empty() || values.len() % record_len != 0 {
            return Err(Error::Dataset(format!("{} values cannot be split into records of length {record_len}", values.len())));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("record {} field {}", k / record_len, k % record_len)));
        }
        Ok(Dataset { record_len, values })
    }

    /// Reads one record per row. A header row is detected and skipped when its
    /// first field does not parse as a number.
    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::Dataset(format!("cannot open {}: {e}", path.display())))?;
        Self::from_csv_reader(file)
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        let mut records = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            match parsed {
                Ok(v) => records.push(v.into_iter().map(S::lit).collect()),
                Err(_) if row == 0 => continue,
                Err(e) => return Err(Error::Dataset(format!("row {row}: {e}"))),
            }
        }
        Self::from_records(&records)
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.record_len
    }

    /// Always false: datasets hold at least one record.
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn record_len(&self) -> usize {
        self.record_len
    }

    #[inline]
    pub fn record(&self, i: usize) -> &[S] {
        &self.values[i * self.record_len..(i + 1) * self.record_len]
    }

    pub fn records(&self) -> impl Iterator<Item = &[S]> {
        self.values.chunks_exact(self.record_len)
    }

    /// Neighbouring dataset with record `i` replaced.
    pub fn with_replaced(&self, i: usize, record: &[S]) -> Result<Self> {
        if i >= self.len() {
            return Err(Error::IndexOutOfRange { index: i, n: self.len() });
        }
        if record.len() != self.record_len {
            return Err(Error::DimensionMismatch { context: "replacement record".into(), expected: self.record_len, got: record.len() });
        }
        let mut out = self.clone();
        out.values[i * self.record_len..(i + 1) * self.record_len].copy_from_slice(record);
        Ok(out)
    }

    /// Coordinate-wise mean of a contiguous field range across all records.
    pub fn field_mean(&self, start: usize, len: usize) -> Vec<S> {
        let mut m = vec![S::zero(); len];
        for r in self.records() {
            for (a, &b) in m.iter_mut().zip(&r[start..start + len]) {
                *a = *a + b;
            }
        }
        let inv = S::one() / S::from_count(self.len());
        m.iter_mut().for_each(|a| *a = *a * inv);
        m
    }

    pub fn cast<T: Real>(&self) -> Dataset<T> {
        Dataset { record_len: self.record_len, values: self.values.iter().map(|v| T::lit(v.as_f64())).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_with_and_without_header() {
        let with = "a,b\n1,2\n3,4\n";
        let d: Dataset<f64> = Dataset::from_csv_reader(with.as_bytes()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.record(1), &[3.0, 4.0]);
        let without = "1,2\n3,4\n";
        let e: Dataset<f64> = Dataset::from_csv_reader(without.as_bytes()).unwrap();
        assert_eq!(d, e);
    }

    #[test]
    fn ragged_rows_rejected() {
        let bad = "1,2\n3\n";
        assert!(Dataset::<f64>::from_csv_reader(bad.as_bytes()).is_err());
        assert!(Dataset::<f64>::from_records(&[]).is_err());
    }

    #[test]
    fn replace_builds_neighbour() {
        let d = Dataset::from_records(&[vec![1.0, 0.0], vec![3.0, 0.0]]).unwrap();
        let e = d.with_replaced(0, &[5.0, 1.0]).unwrap();
        assert_eq!(e.record(0), &[5.0, 1.0]);
        assert_eq!(e.record(1), d.record(1));
        assert_eq!(d.field_mean(0, 2), vec![2.0, 0.0]);
    }
}
