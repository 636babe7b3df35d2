//! Shared fixtures for the criterion benchmarks.

use stfm_core::blocks::{IsabParams, MabParams};
use stfm_core::{ParamStore, Rng};

/// Block width and head count of the runtime comparison.
pub const DIM: usize = 64;
pub const HEADS: usize = 8;
pub const INPUT_DIM: usize = 3;

pub fn sab_block() -> (ParamStore, MabParams) {
    let mut store = ParamStore::new();
    let p = MabParams::new(&mut store, "sab", INPUT_DIM, INPUT_DIM, DIM, HEADS, &mut Rng::new(0)).expect("valid SAB");
    (store, p)
}

pub fn isab_block(m: usize) -> (ParamStore, IsabParams) {
    let mut store = ParamStore::new();
    let p = IsabParams::new(&mut store, "isab", INPUT_DIM, DIM, HEADS, m, &mut Rng::new(0)).expect("valid ISAB");
    (store, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_build_with_expected_widths() {
        let (store, _) = sab_block();
        assert!(store.iter().any(|p| p.value.cols() == DIM));
        let (small, _) = isab_block(4);
        let (large, _) = isab_block(16);
        assert_eq!(small.len(), large.len());
    }
}
