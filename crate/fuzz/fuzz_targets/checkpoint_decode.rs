#![no_main]

use libfuzzer_sys::fuzz_target;
use osd_core::model::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        let again = Checkpoint::decode(&ckpt.encode()).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode(), ckpt.encode());
    }
});
