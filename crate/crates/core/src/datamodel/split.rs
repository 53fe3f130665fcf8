use super::InteractionLog;
use crate::{Error, Result};

/// Leave-one-out partition of one user's sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub user_id: String,
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

impl UserSplit {
    /// Training prefix plus the validation item: the history used to
    /// predict the test item.
    pub fn test_history(&self) -> Vec<usize> {
        let mut h = self.train.clone();
        h.push(self.valid);
        h
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitSet {
    pub users: Vec<UserSplit>,
}

impl SplitSet {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Last interaction → test, second-to-last → validation, rest → train.
pub fn leave_one_out(logs: &[InteractionLog]) -> Result<SplitSet> {
    let users = logs
        .iter()
        .map(|l| {
            let n = l.sequence.len();
            if n < 3 {
                return Err(Error::Split {
                    user_id: l.user_id.clone(),
                    msg: format!("needs at least 3 interactions, has {n}"),
                });
            }
            Ok(UserSplit {
                user_id: l.user_id.clone(),
                train: l.sequence[..n - 2].to_vec(),
                valid: l.sequence[n - 2],
                test: l.sequence[n - 1],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitSet { users })
}
