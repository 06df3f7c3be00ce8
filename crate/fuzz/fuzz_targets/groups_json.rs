#![no_main]

use libfuzzer_sys::fuzz_target;
use tgmtl::grouping::GroupsFile;
use tgmtl::tree::validate_tree;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(file) = GroupsFile::from_json(text) {
        let tree = file.tree().expect("accepted groups file yields a tree");
        assert!(validate_tree(&tree, tree.task_count()).is_empty());
    }
});
