#![no_main]

use filab::model::Model;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = Model::from_bytes(data) {
        let bytes = model.to_bytes().expect("re-serialise parsed model");
        assert_eq!(Model::from_bytes(&bytes).expect("reparse").to_bytes().unwrap(), bytes);
    }
});
