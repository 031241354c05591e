#![no_main]

use filab::tasks::load_mcqa_reader;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = load_mcqa_reader(data) {
        for r in &records {
            assert_eq!(r.choices.len(), 4);
            assert!(('A'..='D').contains(&r.answer));
            let _ = r.render_input();
        }
    }
});
