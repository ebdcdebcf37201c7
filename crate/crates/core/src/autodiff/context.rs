//! Thread-local recording state: grad mode, branch attribution, FLOP tally.

use std::cell::{Cell, RefCell};

use serde::{Deserialize, Serialize};

/// Which part of the model an operation belongs to. Set by the model code
/// with [`branch_scope`] and stamped on every recorded node and FLOP.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Frozen,
    Side,
    Adapter,
    Other,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::Frozen, Branch::Side, Branch::Adapter, Branch::Other];

    pub(crate) fn index(self) -> usize {
        match self {
            Branch::Frozen => 0,
            Branch::Side => 1,
            Branch::Adapter => 2,
            Branch::Other => 3,
        }
    }
}

/// One value per [`Branch`].
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCounts<T> {
    pub frozen: T,
    pub side: T,
    pub adapter: T,
    pub other: T,
}

impl<T: Copy + std::ops::Add<Output = T>> BranchCounts<T> {
    pub fn get(&self, b: Branch) -> T {
        match b {
            Branch::Frozen => self.frozen,
            Branch::Side => self.side,
            Branch::Adapter => self.adapter,
            Branch::Other => self.other,
        }
    }

    pub fn get_mut(&mut self, b: Branch) -> &mut T {
        match b {
            Branch::Frozen => &mut self.frozen,
            Branch::Side => &mut self.side,
            Branch::Adapter => &mut self.adapter,
            Branch::Other => &mut self.other,
        }
    }

    pub fn total(&self) -> T {
        self.frozen + self.side + self.adapter + self.other
    }

    pub(crate) fn from_array(a: [T; 4]) -> Self {
        BranchCounts { frozen: a[0], side: a[1], adapter: a[2], other: a[3] }
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static BRANCH: Cell<Branch> = const { Cell::new(Branch::Other) };
    static FLOPS: RefCell<[u64; 4]> = const { RefCell::new([0; 4]) };
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

pub fn current_branch() -> Branch {
    BRANCH.with(Cell::get)
}

#[must_use]
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Disable graph recording on this thread until the guard drops.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

#[must_use]
pub struct BranchGuard {
    prev: Branch,
}

impl Drop for BranchGuard {
    fn drop(&mut self) {
        BRANCH.with(|b| b.set(self.prev));
    }
}

pub fn branch_scope(branch: Branch) -> BranchGuard {
    let prev = BRANCH.with(|b| b.replace(branch));
    BranchGuard { prev }
}

pub(crate) fn add_flops(n: u64) {
    let idx = current_branch().index();
    FLOPS.with(|f| f.borrow_mut()[idx] += n);
}

/// FLOPs (multiply and add counted separately) executed by matmul and
/// convolution primitives on this thread since the last reset.
pub fn flop_tally() -> BranchCounts<u64> {
    BranchCounts::from_array(FLOPS.with(|f| *f.borrow()))
}

pub fn reset_flop_tally() {
    FLOPS.with(|f| *f.borrow_mut() = [0; 4]);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guards_restore_previous_state() {
        assert!(grad_enabled());
        {
            let _g = no_grad();
            assert!(!grad_enabled());
            {
                let _b = branch_scope(Branch::Frozen);
                assert_eq!(current_branch(), Branch::Frozen);
            }
            assert_eq!(current_branch(), Branch::Other);
        }
        assert!(grad_enabled());
    }
}
