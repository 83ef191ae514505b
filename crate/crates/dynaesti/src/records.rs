//! Long-format response records and the indexed view the EM steps run on.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// One response: who, what, when, and the score. `response` is 0/1 for
/// dichotomous items or a stroke count for golf holes.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseRecord {
    pub student: String,
    pub item: String,
    pub time: f64,
    pub response: i64,
}

/// Records re-indexed by student and item, in a canonical order independent
/// of the input permutation.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub students: Vec<String>,
    pub items: Vec<String>,
    pub records: Vec<IndexedRecord>,
    pub by_student: Vec<Vec<usize>>,
    pub by_item: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexedRecord {
    pub student: usize,
    pub item: usize,
    pub time: f64,
    pub response: i64,
}

impl Dataset {
    pub fn from_records(records: &[ResponseRecord]) -> Result<Dataset> {
        if records.is_empty() {
            return Err(Error::NoRecords);
        }
        let mut students: BTreeMap<&str, usize> = BTreeMap::new();
        let mut items: BTreeMap<&str, usize> = BTreeMap::new();
        for r in records {
            if !r.time.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "non-finite response time for ({}, {})",
                    r.student, r.item
                )));
            }
            let next = students.len();
            students.entry(&r.student).or_insert(next);
            let next = items.len();
            items.entry(&r.item).or_insert(next);
        }
        // BTreeMap iteration is sorted; reassign dense ids in that order
        let student_names: Vec<String> = students.keys().map(|s| s.to_string()).collect();
        let item_names: Vec<String> = items.keys().map(|s| s.to_string()).collect();
        let student_ids: BTreeMap<&str, usize> = student_names
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let item_ids: BTreeMap<&str, usize> = item_names
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();

        let mut indexed: Vec<IndexedRecord> = records
            .iter()
            .map(|r| IndexedRecord {
                student: student_ids[r.student.as_str()],
                item: item_ids[r.item.as_str()],
                time: r.time,
                response: r.response,
            })
            .collect();
        indexed.sort_by(|a, b| {
            (a.student, a.time, a.item)
                .partial_cmp(&(b.student, b.time, b.item))
                .expect("finite times")
        });
        for w in indexed.windows(2) {
            if w[0].student == w[1].student
                && w[0].item == w[1].item
                && w[0].time == w[1].time
            {
                return Err(Error::DuplicateRecord(format!(
                    "({}, {}, {})",
                    student_names[w[0].student], item_names[w[0].item], w[0].time
                )));
            }
        }

        let mut by_student = vec![Vec::new(); student_names.len()];
        let mut by_item = vec![Vec::new(); item_names.len()];
        for (k, r) in indexed.iter().enumerate() {
            by_student[r.student].push(k);
            by_item[r.item].push(k);
        }
        Ok(Dataset {
            students: student_names,
            items: item_names,
            records: indexed,
            by_student,
            by_item,
        })
    }

    pub fn time_span(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in &self.records {
            lo = lo.min(r.time);
            hi = hi.max(r.time);
        }
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(s: &str, i: &str, t: f64, r: i64) -> ResponseRecord {
        ResponseRecord {
            student: s.into(),
            item: i.into(),
            time: t,
            response: r,
        }
    }

    #[test]
    fn canonical_order_is_permutation_invariant() {
        let a = vec![
            rec("s2", "i1", 0.5, 1),
            rec("s1", "i2", 0.25, 0),
            rec("s1", "i1", 0.75, 1),
        ];
        let mut b = a.clone();
        b.reverse();
        let da = Dataset::from_records(&a).unwrap();
        let db = Dataset::from_records(&b).unwrap();
        assert_eq!(da.students, db.students);
        assert_eq!(da.items, db.items);
        assert_eq!(da.records, db.records);
    }

    #[test]
    fn duplicates_rejected() {
        let rs = vec![rec("s1", "i1", 0.5, 1), rec("s1", "i1", 0.5, 0)];
        assert!(matches!(
            Dataset::from_records(&rs),
            Err(Error::DuplicateRecord(_))
        ));
    }
}
