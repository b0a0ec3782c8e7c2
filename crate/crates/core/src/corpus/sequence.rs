use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Attribute, SubDataset};
use crate::error::{Error, Result};

/// An ordered run of focus attributes; stage `t` trains on the sub-dataset
/// whose focus is `focuses[t]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskSequence {
    pub focuses: Vec<Attribute>,
}

impl TaskSequence {
    pub fn new(focuses: Vec<Attribute>) -> Result<Self> {
        if focuses.is_empty() {
            return Err(Error::Config("task sequence is empty".into()));
        }
        for (i, a) in focuses.iter().enumerate() {
            if focuses[..i].contains(a) {
                return Err(Error::Config(format!(
                    "focus attribute {a} appears twice in the sequence"
                )));
            }
        }
        Ok(Self { focuses })
    }

    pub fn len(&self) -> usize {
        self.focuses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.focuses.is_empty()
    }

    /// Resolves each stage to its sub-dataset.
    pub fn resolve<'a>(&self, subsets: &'a [SubDataset]) -> Result<Vec<&'a SubDataset>> {
        self.focuses
            .iter()
            .map(|f| {
                subsets.iter().find(|d| d.focus == *f).ok_or_else(|| {
                    Error::Config(format!("no sub-dataset has focus attribute {f}"))
                })
            })
            .collect()
    }

    /// Compact label such as `age-gender-country`.
    pub fn slug(&self) -> String {
        self.focuses
            .iter()
            .map(|a| a.key())
            .collect::<Vec<_>>()
            .join("-")
    }
}

impl fmt::Display for TaskSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.slug())
    }
}

/// All ordered arrangements of `n` distinct attributes from `focuses`, in
/// lexicographic order of their positions in `focuses`.
pub fn enumerate_sequences(focuses: &[Attribute], n: usize) -> Result<Vec<TaskSequence>> {
    TaskSequence::new(focuses.to_vec())?;
    if n < 2 || n > focuses.len() {
        return Err(Error::Config(format!(
            "sequence length must lie in [2, {}], got {n}",
            focuses.len()
        )));
    }
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(n);
    let mut used = vec![false; focuses.len()];
    arrange(focuses, n, &mut current, &mut used, &mut out);
    Ok(out)
}

fn arrange(
    focuses: &[Attribute],
    n: usize,
    current: &mut Vec<Attribute>,
    used: &mut [bool],
    out: &mut Vec<TaskSequence>,
) {
    if current.len() == n {
        out.push(TaskSequence {
            focuses: current.clone(),
        });
        return;
    }
    for i in 0..focuses.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        current.push(focuses[i]);
        arrange(focuses, n, current, used, out);
        current.pop();
        used[i] = false;
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn permutation_counts() {
        let all = enumerate_sequences(&Attribute::ALL, 4).unwrap();
        assert_eq!(all.len(), 24);
        assert_eq!(all.iter().collect::<HashSet<_>>().len(), 24);
        assert_eq!(enumerate_sequences(&Attribute::ALL, 2).unwrap().len(), 12);
        assert_eq!(enumerate_sequences(&Attribute::ALL, 3).unwrap().len(), 24);
    }

    #[test]
    fn lexicographic_order() {
        let seqs = enumerate_sequences(&Attribute::ALL, 4).unwrap();
        assert_eq!(seqs[0].focuses, Attribute::ALL.to_vec());
        assert_eq!(
            seqs[23].focuses,
            vec![
                Attribute::Ethnicity,
                Attribute::Country,
                Attribute::Gender,
                Attribute::Age
            ]
        );
        assert!(seqs.windows(2).all(|w| {
            let idx = |s: &TaskSequence| s.focuses.iter().map(|a| a.index()).collect::<Vec<_>>();
            idx(&w[0]) < idx(&w[1])
        }));
    }

    #[test]
    fn out_of_range_length_rejected() {
        assert!(enumerate_sequences(&Attribute::ALL, 1).is_err());
        assert!(enumerate_sequences(&Attribute::ALL, 5).is_err());
    }

    #[test]
    fn duplicate_focus_rejected() {
        assert!(TaskSequence::new(vec![Attribute::Age, Attribute::Age]).is_err());
    }
}
