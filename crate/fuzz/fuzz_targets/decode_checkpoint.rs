#![no_main]

use libfuzzer_sys::fuzz_target;
use negfeed::training::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).map(|c| c.to_bytes()).ok(), Some(ck.to_bytes()));
        let _ = ck.model();
    }
});
