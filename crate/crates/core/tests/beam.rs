mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::harness::beam_case;

#[test]
fn fixed_width_selection_equals_exhaustive_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xbea);
    for case in 0..1500 {
        let (got, want) = beam_case(&mut rng);
        assert_eq!(got, want, "instance {case}");
    }
}
