#![no_main]

use filab_cli::RunManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = serde_json::from_slice::<RunManifest>(data) {
        let json = serde_json::to_vec(&m).unwrap();
        assert_eq!(serde_json::from_slice::<RunManifest>(&json).unwrap(), m);
    }
});
