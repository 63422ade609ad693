#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(head) = recal::head::decode_head(data) {
        let bytes = recal::head::encode_head(&head).expect("decoded head re-encodes");
        assert_eq!(recal::head::decode_head(&bytes).expect("round trip"), head);
    }
});
