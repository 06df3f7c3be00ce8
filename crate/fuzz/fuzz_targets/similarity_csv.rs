#![no_main]

use libfuzzer_sys::fuzz_target;
use tgmtl::grouping::{compute_tree, SearchMode};
use tgmtl::similarity::SimilarityMatrix;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(sim) = SimilarityMatrix::from_csv(text) {
        let again = SimilarityMatrix::from_csv(&sim.to_csv().unwrap()).unwrap();
        assert_eq!(again.task_names, sim.task_names);
        let t = sim.task_count();
        if (1..=6).contains(&t) {
            let counts: Vec<usize> = (1..=t).collect();
            compute_tree(&sim, &counts, SearchMode::CountConstrained).unwrap();
        }
    }
});
