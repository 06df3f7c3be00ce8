#![no_main]

use libfuzzer_sys::fuzz_target;
use tgmtl::tree::{validate_tree, TaskTree};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(tree) = TaskTree::from_json(text) {
        let t = tree.stages.first().map_or(0, |p| p.task_count());
        if validate_tree(&tree, t).is_empty() {
            for s in 0..tree.stage_count() {
                tree.parents(s).expect("valid tree has parents");
            }
            assert_eq!(TaskTree::from_json(&tree.to_json()).unwrap(), tree);
        }
    }
});
