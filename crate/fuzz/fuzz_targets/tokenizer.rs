#![no_main]

use filab::Vocab;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let v = Vocab::new();
    if let Ok(ids) = v.encode(text) {
        assert_eq!(v.decode(&ids).unwrap(), text);
    }
    let ids: Vec<u32> = text.bytes().map(u32::from).collect();
    let _ = v.decode(&ids);
});
