#![no_main]

use filab::circuits::Circuit;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Circuit::from_json(data) {
        let json = serde_json::to_vec(&c).unwrap();
        assert_eq!(Circuit::from_json(&json).unwrap(), c);
    }
});
