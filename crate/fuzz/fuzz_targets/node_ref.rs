#![no_main]

use filab::circuits::parse_heads;
use filab::model::NodeRef;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|s: &str| {
    if let Ok(node) = s.parse::<NodeRef>() {
        assert_eq!(node.to_string().parse::<NodeRef>().unwrap(), node);
    }
    let _ = parse_heads(s);
});
